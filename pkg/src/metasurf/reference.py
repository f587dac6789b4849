"""Full-array reference solver: every unit cell of the layer meshed explicitly."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import fem
from .cell import HomogenizedCoeffs, MaterialPair
from .macro import (MacroConfig, MacroProblem, MacroSolution, build_macro_mesh, inlet_tagger,
                    outlet_breaks, outlet_tagger)
from .mesh import (AIR, ELASTIC, NDD, OMEGA_MINUS, OMEGA_PLUS, MeshError, TriMesh, grid_mesh)


class StitchError(MeshError):
    pass


# ---------------------------------------------------------------- geometry

def _transition_rows(xs, y0, sign, levels):
    """Rows that halve the number of segments ``levels`` times, starting at
    height ``y0`` and growing in direction ``sign`` (+1 up, -1 down)."""
    nodes, tris = [], []
    cur = np.asarray(xs, float)
    y = y0
    bottom = [(x, y) for x in cur]
    nodes.extend(bottom)
    ids = np.arange(len(cur))
    for _ in range(levels):
        coarse = cur[::2]
        hgt = float(np.mean(np.diff(coarse)))
        y = y + sign * hgt
        cid = len(nodes) + np.arange(len(coarse))
        nodes.extend((x, y) for x in coarse)
        a, b, c = ids[0:-1:2], ids[1::2], ids[2::2]
        A, C = cid[:-1], cid[1:]
        t = np.concatenate([np.stack([a, b, A], 1), np.stack([b, C, A], 1), np.stack([b, c, C], 1)])
        if sign < 0:
            t = t[:, ::-1]
        tris.append(t)
        cur, ids = coarse, cid
    return np.array(nodes), np.concatenate(tris) if tris else np.zeros((0, 3), int), cur, y


def _side_edges(nodes, ids, tag):
    return [(int(a), int(b), tag) for a, b in zip(ids[:-1], ids[1:])]


def half_domain(xs_fine, cfg: MacroConfig, side: str, h_coarse: float | None = None) -> TriMesh:
    """Omega+ (side='plus', below the layer) or Omega- ('minus', above it)
    with its interface edge on the fine node row ``xs_fine``."""
    h_coarse = cfg.h if h_coarse is None else h_coarse
    breaks = np.array(outlet_breaks(cfg))
    xs = np.asarray(xs_fine, float)
    levels = 0
    cur = xs
    while (len(cur) - 1) % 2 == 0 and np.mean(np.diff(cur)) * 2 <= h_coarse * 1.0001:
        nxt = cur[::2]
        if not np.all(np.min(np.abs(nxt[None, :] - breaks[:, None]), axis=1) < 1e-12):
            break
        cur = nxt
        levels += 1
    g = 0.5 * cfg.delta
    sign = 1.0 if side == "minus" else -1.0
    y0 = sign * g
    tn, tt, coarse, yt = _transition_rows(xs, y0, sign, levels)
    remaining = cfg.depth - abs(yt - y0)
    if remaining <= 0:
        raise MeshError("transition rows exceed the domain depth")
    ny = max(1, int(round(remaining / np.mean(np.diff(coarse)))))
    if side == "minus":
        ys = np.linspace(yt, g + cfg.depth, ny + 1)
        far = {"top": outlet_tagger(cfg)}
    else:
        ys = np.linspace(-g - cfg.depth, yt, ny + 1)
        far = {"bottom": inlet_tagger(cfg)}
    region = OMEGA_MINUS if side == "minus" else OMEGA_PLUS
    grid = grid_mesh(coarse, ys, {**far, "left": "wall", "right": "wall"}, region=region, scale="macro")
    # glue: grid nodes on the row yt coincide with the last transition row
    nodes = np.vstack([tn, grid.nodes])
    off = len(tn)
    tris = np.vstack([tt, grid.tris + off]) if len(tt) else grid.tris + off
    edges = list(grid.edges + off)
    tags = list(grid.edge_tags)
    # interface edges and transition side walls
    n_if = len(xs)
    for a in range(n_if - 1):
        e = (a, a + 1) if side == "plus" else (a + 1, a)
        edges.append(e)
        tags.append("gamma0")
    # side walls of the transition rows: leftmost/rightmost node per row
    rows = np.unique(np.round(tn[:, 1], 14))
    left = [int(np.nonzero((np.round(tn[:, 1], 14) == r) & (tn[:, 0] == tn[:, 0].min()))[0][0]) for r in rows]
    right = [int(np.nonzero((np.round(tn[:, 1], 14) == r) & (tn[:, 0] == tn[:, 0].max()))[0][0]) for r in rows]
    order = np.argsort(rows)
    left = np.array(left)[order]
    right = np.array(right)[order]
    for a, b in zip(left[:-1], left[1:]):
        edges.append((b, a))
        tags.append("wall")
    for a, b in zip(right[:-1], right[1:]):
        edges.append((a, b))
        tags.append("wall")
    mesh = TriMesh(nodes, tris, np.full(len(tris), region), np.array(edges), np.array(tags, object), "macro")
    return _merge_duplicates(mesh)[0]


def _merge_duplicates(mesh: TriMesh, decimals: int = 10):
    key = np.round(mesh.nodes, decimals)
    uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    # keep first-occurrence order for determinism
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    new = rank[inv]
    nodes = mesh.nodes[first[order]]
    edges = new[mesh.edges]
    keep = edges[:, 0] != edges[:, 1]
    # drop edges that became interior duplicates (listed twice with opposite direction)
    e = edges[keep]
    tags = mesh.edge_tags[keep]
    srt = np.sort(e, axis=1)
    _, idx, cnt = np.unique(srt, axis=0, return_index=True, return_counts=True)
    single = np.zeros(len(e), bool)
    single[idx[cnt == 1]] = True
    return TriMesh(nodes, new[mesh.tris], mesh.regions, e[single], tags[single], mesh.scale,
                   {}), len(mesh.nodes) - len(nodes)


def build_array_geometry(cell_mesh: TriMesh, n_cells: int, cfg: MacroConfig,
                         h_coarse: float | None = None) -> TriMesh:
    """Half-domains stitched node-exactly to ``n_cells`` scaled cell copies."""
    if abs(n_cells * cfg.eps0 - cfg.width) > 1e-9 * cfg.width:
        raise StitchError(f"{n_cells} cells of size {cfg.eps0} do not span the width {cfg.width}")
    eps, dl = cfg.eps0, cfg.delta
    y = cell_mesh.nodes
    bx = np.unique(y[cell_mesh.tagged_nodes("iy_plus"), 0])
    tx = np.unique(y[cell_mesh.tagged_nodes("iy_minus"), 0])
    if len(bx) != len(tx) or np.abs(bx - tx).max() > 1e-12:
        raise StitchError("cell mesh needs matching node rows on its top and bottom")
    xs_fine = np.concatenate([(c + bx[:-1]) * eps for c in range(n_cells)] + [[n_cells * eps]])
    lower = half_domain(xs_fine, cfg, "plus", h_coarse)
    upper = half_domain(xs_fine, cfg, "minus", h_coarse)

    nodes = [lower.nodes, upper.nodes]
    tris = [lower.tris, upper.tris + lower.n_nodes]
    regs = [lower.regions, upper.regions]
    edges = [lower.edges, upper.edges + lower.n_nodes]
    tags = [lower.edge_tags, upper.edge_tags]
    off = lower.n_nodes + upper.n_nodes
    for c in range(n_cells):
        p = np.column_stack([(c + y[:, 0]) * eps, y[:, 1] * dl - 0.5 * dl])
        nodes.append(p)
        tris.append(cell_mesh.tris + off)
        regs.append(cell_mesh.regions)
        ce, ct = [], []
        for e, t in zip(cell_mesh.edges, cell_mesh.edge_tags):
            if (t == "gamma1" and c == 0) or (t == "gamma2" and c == n_cells - 1):
                ce.append(e)
                ct.append("wall")
        if ce:
            edges.append(np.array(ce) + off)
            tags.append(np.array(ct, object))
        off += cell_mesh.n_nodes
    raw = TriMesh(np.vstack(nodes), np.vstack(tris), np.concatenate(regs), np.vstack(edges),
                  np.concatenate(tags), "macro")
    # gamma0 edges of the half-domains become interior after merging
    keep = raw.edge_tags != "gamma0"
    raw = TriMesh(raw.nodes, raw.tris, raw.regions, raw.edges[keep], raw.edge_tags[keep], "macro")
    full, merged = _merge_duplicates(raw)
    # side nodes are shared with the neighbour cell, top/bottom rows with the half-domains
    n_side = len(cell_mesh.tagged_nodes("gamma1"))
    expected = 2 * len(xs_fine) + (n_cells - 1) * n_side
    if merged != expected:
        raise StitchError(f"stitching merged {merged} nodes, expected {expected}")
    pairs, tri_edges = full.all_edges
    cnt = np.bincount(tri_edges.ravel(), minlength=len(pairs))
    if np.any(cnt > 2):
        k = int(np.argmax(cnt > 2))
        raise StitchError(f"non-manifold edge at {full.nodes[pairs[k]].tolist()}")
    full.validate()
    return full


# ---------------------------------------------------------------- solve

def reference_materials(m: MaterialPair, cfg: MacroConfig):
    rho = {OMEGA_PLUS: cfg.rho0, OMEGA_MINUS: cfg.rho0, AIR: m.rho_air, NDD: m.rho_air,
           ELASTIC: m.rho_elastic}
    K = {OMEGA_PLUS: cfg.K0, OMEGA_MINUS: cfg.K0, AIR: m.K_air, NDD: m.K_air, ELASTIC: m.K_elastic}
    return rho, K


@dataclass
class ReferenceSolution:
    p_ref: np.ndarray
    space: fem.TriSpace
    cfg: MacroConfig
    residual: float = 0.0

    @property
    def mesh(self):
        return self.space.mesh

    def boundary_norm(self, tag: str) -> float:
        M = fem.boundary_mass(self.space, tag)
        return float(np.real(np.conj(self.p_ref) @ (M @ self.p_ref)))

    def evaluate(self, pts, regions=None):
        return evaluate_at(self.space, self.p_ref, pts, regions)

    def flux(self, tag: str) -> float:
        cfg = self.cfg
        M = fem.boundary_mass(self.space, tag)
        quad = float(np.real(np.conj(self.p_ref) @ (M @ self.p_ref)))
        val = cfg.k0 * quad
        if tag == "in":
            lin = fem.boundary_source(self.space, tag, 1.0) @ self.p_ref
            val -= 2 * cfg.k0 * float(np.real(np.conj(cfg.P_in) * lin))
        return val / (2 * cfg.omega * cfg.rho0)

    def power_balance(self) -> dict:
        inflow = -self.flux("in")
        out = sum(self.flux(t) for t in self.cfg.outlet_tags)
        inc = self.cfg.incident_power()
        return {"incident": inc, "in": inflow, "out": out, "imbalance": abs(inflow - out) / inc}


class ReferenceProblem:
    """Frequency-independent parts of the full-array system."""

    def __init__(self, full_mesh: TriMesh, materials: MaterialPair, cfg: MacroConfig):
        self.mesh = full_mesh
        self.cfg = cfg
        self.V = fem.TriSpace(full_mesh, 2)
        rho, K = reference_materials(materials, cfg)
        self.S = fem.stiffness(self.V, {k: 1 / v for k, v in rho.items()})
        self.M = fem.mass(self.V, {k: 1 / v for k, v in K.items()})
        self.R = fem.boundary_mass(self.V, ("in",) + cfg.outlet_tags)
        self.f = fem.boundary_source(self.V, "in", 1.0)

    @property
    def n_dofs(self):
        return self.V.n_dofs

    def solve(self, cfg: MacroConfig | None = None) -> ReferenceSolution:
        cfg = self.cfg if cfg is None else cfg
        A = self.S - cfg.omega ** 2 * self.M + (1j * cfg.k0 / cfg.rho0) * self.R
        b = (2j * cfg.k0 / cfg.rho0 * cfg.P_in) * self.f
        sys = fem.SparseSystem(A, b)
        x = fem.solve(sys, check=1e-8)
        return ReferenceSolution(x, self.V, cfg, sys.residual(x))


def solve_reference(full_mesh: TriMesh, materials: MaterialPair, cfg: MacroConfig) -> ReferenceSolution:
    return ReferenceProblem(full_mesh, materials, cfg).solve()


# ---------------------------------------------------------------- evaluation

def locate(mesh: TriMesh, pts, tri_subset=None, tol=1e-10):
    """Containing triangle and barycentric coordinates for each point."""
    pts = np.atleast_2d(np.asarray(pts, float))
    cand = np.arange(mesh.n_tris) if tri_subset is None else np.asarray(tri_subset)
    P = mesh.nodes[mesh.tris[cand]]
    tree = cKDTree(P.mean(axis=1))
    found = np.full(len(pts), -1)
    lam = np.zeros((len(pts), 3))
    todo = np.arange(len(pts))
    for k in (8, 32, 128, len(cand)):
        if len(todo) == 0:
            break
        k = min(k, len(cand))
        _, nb = tree.query(pts[todo], k=k)
        nb = nb.reshape(len(todo), -1)
        T = P[nb]  # (n, k, 3, 2)
        x = pts[todo][:, None, :]
        v0 = T[:, :, 1] - T[:, :, 0]
        v1 = T[:, :, 2] - T[:, :, 0]
        v2 = x - T[:, :, 0]
        det = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
        l1 = (v2[..., 0] * v1[..., 1] - v2[..., 1] * v1[..., 0]) / det
        l2 = (v0[..., 0] * v2[..., 1] - v0[..., 1] * v2[..., 0]) / det
        l0 = 1 - l1 - l2
        L = np.stack([l0, l1, l2], -1)
        inside = np.all(L >= -tol, axis=-1)
        hit = inside.any(axis=1)
        j = np.argmax(inside, axis=1)
        rows = todo[hit]
        found[rows] = cand[nb[hit, j[hit]]]
        lam[rows] = L[hit, j[hit]]
        todo = todo[~hit]
    if len(todo):
        raise MeshError(f"point {pts[todo[0]].tolist()} outside the mesh")
    return found, lam


def evaluate_at(space: fem.TriSpace, u, pts, regions=None):
    """Point values of a P1/P2 field."""
    mesh = space.mesh
    subset = space.tri_idx if regions is None else space.tri_idx[np.isin(mesh.regions[space.tri_idx], regions)]
    tri, lam = locate(mesh, pts, subset)
    pos = np.searchsorted(space.tri_idx, tri)
    v, _ = fem.basis(space.order, lam)  # (n, nloc)
    return np.sum(u[space.elem_dofs[pos]] * v, axis=1)


def error_field(macro_sol: MacroSolution, ref: ReferenceSolution) -> dict:
    """e = |Re P - Re p_ref| / mean|Re P| at the macro P2 nodes of each half-domain."""
    out = {}
    for key, V, u, reg in (("plus", macro_sol.problem.Vp, macro_sol.P_plus, OMEGA_PLUS),
                           ("minus", macro_sol.problem.Vm, macro_sol.P_minus, OMEGA_MINUS)):
        lo, hi = V.dof_coords.min(0), V.dof_coords.max(0)
        rlo = ref.mesh.nodes[np.unique(ref.mesh.tris[ref.mesh.regions == reg])].min(0)
        rhi = ref.mesh.nodes[np.unique(ref.mesh.tris[ref.mesh.regions == reg])].max(0)
        if np.abs(lo - rlo).max() > 1e-9 or np.abs(hi - rhi).max() > 1e-9:
            raise MeshError(f"half-domain extents differ between macro and reference ({key})")
        pr = ref.evaluate(V.dof_coords, regions=[reg])
        area = V.mesh.areas[V.tri_idx].sum()
        mean = _mean_abs_re(V, u) / area
        out[key] = np.abs(u.real - pr.real) / mean
        out[key + "_coords"] = V.dof_coords
    out["max"] = float(max(out["plus"].max(), out["minus"].max()))
    return out


def _mean_abs_re(V, u):
    lam, w = fem._Q5
    vals = V.values_at(u, lam)
    return float(np.sum((np.abs(vals.real) @ w) * V.mesh.areas[V.tri_idx]))


def intensity(space: fem.TriSpace, p, rho0: float, omega: float) -> np.ndarray:
    """Time-averaged intensity 0.5 Re(p conj(u)), u = -grad p / (i omega rho0),
    at element centroids (m, 2)."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    c = np.array([[1 / 3, 1 / 3, 1 / 3]])
    pc = space.values_at(p, c)[:, 0]
    g = space.gradients_at(p, c)[:, 0, :]
    u = -g / (1j * omega * rho0)
    return 0.5 * np.real(pc[:, None] * np.conj(u))


# ---------------------------------------------------------------- sweep

SWEEP_COLUMNS = ("k0", "freq_hz", "h_hom", "h_ref", "rel_err")


def _sweep_one(args):
    k0, coeffs, cfg, macro_mesh, refprob, meas = args
    c = cfg.with_(k0=float(k0))
    try:
        hs = MacroProblem(macro_mesh, c).solve(coeffs)
        h_hom = sum(hs.boundary_norm(t) for t in meas)
        rs = refprob.solve(c)
        h_ref = sum(rs.boundary_norm(t) for t in meas)
        err = abs(h_hom - h_ref) / h_ref
    except (fem.SolverError, np.linalg.LinAlgError):
        h_hom = h_ref = err = float("nan")
    return (float(k0), c.freq_hz, h_hom, h_ref, err)


def frequency_sweep(cell_mesh: TriMesh, coeffs: HomogenizedCoeffs, cfg: MacroConfig, k0_values,
                    materials: MaterialPair = MaterialPair(), meas=None, n_jobs: int = 1,
                    h_coarse: float | None = None, macro_mesh: TriMesh | None = None):
    """Rows (k0, freq_hz, h_hom, h_ref, rel_err) for each wavenumber."""
    meas = tuple(meas or cfg.outlet_tags)
    macro_mesh = build_macro_mesh(cfg) if macro_mesh is None else macro_mesh
    full = build_array_geometry(cell_mesh, cfg.n_cells, cfg, h_coarse)
    refprob = ReferenceProblem(full, materials, cfg)
    jobs = [(k, coeffs, cfg, macro_mesh, refprob, meas) for k in k0_values]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            rows = list(ex.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def resonance_windows(rows, rel_jump: float = 0.5, pad: float = 2.0):
    """k0 windows around sharp features of the reference response.

    A sample is flagged when h_ref changes by more than ``rel_jump`` relative
    to a neighbour; each flagged sample opens a window of +-``pad``."""
    k = np.array([r[0] for r in rows])
    h = np.array([r[3] for r in rows])
    flag = np.zeros(len(k), bool)
    d = np.abs(np.diff(h)) / np.minimum(h[1:], h[:-1])
    flag[1:] |= d > rel_jump
    flag[:-1] |= d > rel_jump
    wins = []
    for kk in k[flag]:
        lo, hi = kk - pad, kk + pad
        if wins and lo <= wins[-1][1]:
            wins[-1] = (wins[-1][0], hi)
        else:
            wins.append((lo, hi))
    return wins
