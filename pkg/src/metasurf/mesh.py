"""Triangular meshes: structured generation, tagging, periodic pairing,
level-set conforming splits and legacy VTK IO."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping

import numpy as np

# region labels
AIR = 0
ELASTIC = 1
NDD = 2
OMEGA_PLUS = 3
OMEGA_MINUS = 4

REGION_ROLE = {
    AIR: "air",
    ELASTIC: "elastic",
    NDD: "non-design",
    OMEGA_PLUS: "air",
    OMEGA_MINUS: "air",
}
DESIGN_REGIONS = (AIR, ELASTIC)

BOUNDARY_TAGS = (
    "in", "out", "out1", "out2", "gamma0", "iy_plus", "iy_minus",
    "gamma1", "gamma2", "wall",
)


class MeshError(ValueError):
    pass


def _edge_key(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.minimum(a, b), np.maximum(a, b)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable 2-D triangulation.

    ``edges`` are boundary (or internal-interface) segments carrying a tag from
    ``BOUNDARY_TAGS``. ``scale`` is "micro" (cell units) or "macro" (meters).
    """

    nodes: np.ndarray
    tris: np.ndarray
    regions: np.ndarray
    edges: np.ndarray
    edge_tags: np.ndarray
    scale: str = "micro"
    point_data: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        tris = np.ascontiguousarray(self.tris, dtype=np.int64).reshape(-1, 3)
        regions = np.ascontiguousarray(self.regions, dtype=np.int64).reshape(-1)
        edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2)
        tags = np.asarray(self.edge_tags, dtype=object).reshape(-1)
        if regions.shape[0] != tris.shape[0]:
            raise MeshError("one region label per triangle required")
        if tags.shape[0] != edges.shape[0]:
            raise MeshError("one tag per boundary edge required")
        bad = set(tags.tolist()) - set(BOUNDARY_TAGS)
        if bad:
            raise MeshError(f"unknown boundary tag(s): {sorted(bad)}")
        if self.scale not in ("micro", "macro"):
            raise MeshError(f"unknown scale {self.scale!r}")
        for arr in (nodes, tris, regions, edges):
            arr.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tris", tris)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_tags", tags)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_tris(self) -> int:
        return self.tris.shape[0]

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.tris]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @property
    def tags(self) -> set:
        return set(self.edge_tags.tolist())

    def tagged_edges(self, tag: str) -> np.ndarray:
        return self.edges[self.edge_tags == tag]

    def tagged_nodes(self, tag: str) -> np.ndarray:
        return np.unique(self.tagged_edges(tag))

    def region_mask(self, regions) -> np.ndarray:
        return np.isin(self.regions, np.atleast_1d(regions))

    def region_area(self, regions) -> float:
        return float(self.areas[self.region_mask(regions)].sum())

    def quality(self) -> np.ndarray:
        return triangle_quality(self.nodes, self.tris)

    @cached_property
    def all_edges(self) -> tuple:
        """Unique undirected edges and the per-triangle local edge -> edge map.

        Local edge k of a triangle joins vertices k and (k+1) % 3.
        """
        t = self.tris
        a = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        b = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        lo, hi = _edge_key(a, b)
        keys = lo * self.n_nodes + hi
        uniq, inv = np.unique(keys, return_inverse=True)
        pairs = np.stack([uniq // self.n_nodes, uniq % self.n_nodes], axis=1)
        tri_edges = inv.reshape(3, -1).T
        return pairs, tri_edges

    def validate(self, closed: bool = True) -> None:
        """Check orientation and that tagged edges cover the outer boundary once."""
        if np.any(self.signed_areas <= 0):
            i = int(np.argmin(self.signed_areas))
            raise MeshError(f"triangle {i} has non-positive area")
        if not closed:
            return
        pairs, tri_edges = self.all_edges
        count = np.bincount(tri_edges.ravel(), minlength=len(pairs))
        outer = pairs[count == 1]
        okeys = set(map(tuple, np.sort(outer, axis=1).tolist()))
        tkeys = [tuple(e) for e in np.sort(self.edges, axis=1).tolist()]
        if len(set(tkeys)) != len(tkeys):
            raise MeshError("boundary edge tagged more than once")
        missing = okeys - set(tkeys)
        if missing:
            e = sorted(missing)[0]
            raise MeshError(f"untagged boundary edge at {self.nodes[list(e)].tolist()}")

    def with_point_data(self, **fields) -> "TriMesh":
        pd = dict(self.point_data)
        pd.update({k: np.asarray(v) for k, v in fields.items()})
        return TriMesh(self.nodes, self.tris, self.regions, self.edges,
                       self.edge_tags, self.scale, pd)

    def with_regions(self, regions) -> "TriMesh":
        return TriMesh(self.nodes, self.tris, regions, self.edges,
                       self.edge_tags, self.scale, dict(self.point_data))


def triangle_quality(nodes, tris) -> np.ndarray:
    """Normalized inradius/circumradius ratio 2r/R (1 for equilateral)."""
    p = nodes[tris]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    s = 0.5 * (a + b + c)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = 16.0 * area**2 / (s * a * b * c)
    return np.where(area > 0, q, 0.0)


# ---------------------------------------------------------------- generation

TagRule = Mapping[str, "str | Callable[[np.ndarray], np.ndarray]"]


def grid_mesh(xs, ys, tag_spec: TagRule, region=AIR, diagonal="right",
              scale="micro") -> TriMesh:
    """Tensor-product triangulation on breakpoints ``xs`` x ``ys``.

    ``tag_spec`` maps side name (bottom/right/top/left) to a tag or to a
    function of edge midpoints returning tags. ``region`` is a label or a
    function of triangle centroids. ``diagonal`` is "right", "left" or "mirror"
    (union-jack, symmetric about both center lines).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or ys.ndim != 1 or len(xs) < 2 or len(ys) < 2:
        raise MeshError("need at least two breakpoints per direction")
    if np.any(np.diff(xs) <= 0) or np.any(np.diff(ys) <= 0):
        raise MeshError("breakpoints must be strictly increasing")
    nx, ny = len(xs) - 1, len(ys) - 1
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    n00 = idx[j, i]
    n10 = idx[j, i + 1]
    n11 = idx[j + 1, i + 1]
    n01 = idx[j + 1, i]
    if diagonal == "right":
        typ = np.ones_like(i, dtype=bool)
    elif diagonal == "left":
        typ = np.zeros_like(i, dtype=bool)
    elif diagonal == "mirror":
        xm = 0.5 * (xs[i] + xs[i + 1])
        ym = 0.5 * (ys[j] + ys[j + 1])
        typ = (xm < 0.5 * (xs[0] + xs[-1])) == (ym < 0.5 * (ys[0] + ys[-1]))
    else:
        raise MeshError(f"unknown diagonal pattern {diagonal!r}")
    # typ True: diagonal n00-n11, else n10-n01
    t1 = np.where(typ[:, None], np.stack([n00, n10, n11], 1), np.stack([n00, n10, n01], 1))
    t2 = np.where(typ[:, None], np.stack([n00, n11, n01], 1), np.stack([n10, n11, n01], 1))
    tris = np.stack([t1, t2], axis=1).reshape(-1, 3)
    cent = nodes[tris].mean(axis=1)
    regions = region(cent) if callable(region) else np.full(len(tris), region)

    sides = {
        "bottom": np.stack([idx[0, :-1], idx[0, 1:]], 1),
        "right": np.stack([idx[:-1, -1], idx[1:, -1]], 1),
        "top": np.stack([idx[-1, 1:], idx[-1, :-1]], 1),
        "left": np.stack([idx[1:, 0], idx[:-1, 0]], 1),
    }
    edges, tags = [], []
    for side, rule in tag_spec.items():
        if side not in sides:
            raise MeshError(f"unknown side {side!r}")
        e = sides[side]
        if callable(rule):
            mid = nodes[e].mean(axis=1)
            t = np.asarray(rule(mid), dtype=object)
        else:
            t = np.full(len(e), rule, dtype=object)
        keep = np.array([x is not None for x in t], dtype=bool)
        edges.append(e[keep])
        tags.append(t[keep])
    edges = np.concatenate(edges) if edges else np.zeros((0, 2), int)
    tags = np.concatenate(tags) if tags else np.zeros(0, object)
    return TriMesh(nodes, tris, regions, edges, tags, scale=scale)


def generate_rect_mesh(width, height, nx, ny, tag_spec: TagRule | str = "wall",
                       origin=(0.0, 0.0), **kw) -> TriMesh:
    """Structured rectangle with ``2*nx*ny`` triangles."""
    if width <= 0 or height <= 0:
        raise MeshError("width and height must be positive")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError("nx and ny must be positive integers")
    if isinstance(tag_spec, str):
        tag_spec = {s: tag_spec for s in ("bottom", "right", "top", "left")}
    xs = origin[0] + np.linspace(0.0, width, int(nx) + 1)
    ys = origin[1] + np.linspace(0.0, height, int(ny) + 1)
    return grid_mesh(xs, ys, tag_spec, **kw)


def _segments(breaks, n_total):
    """Breakpoints covering [breaks[0], breaks[-1]] with about n_total cells,
    keeping every entry of ``breaks`` as a grid line."""
    breaks = np.asarray(breaks, dtype=float)
    span = breaks[-1] - breaks[0]
    out = [breaks[:1]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        k = max(1, int(round(n_total * (b - a) / span)))
        out.append(np.linspace(a, b, k + 1)[1:])
    return np.concatenate(out)


def unit_cell_mesh(n: int = 40, ndd: float = 0.1, diagonal="mirror") -> TriMesh:
    """Unit cell [0,1]^2 with non-design strips of height ``ndd`` at bottom and
    top; the middle band is the design domain (labeled air)."""
    xs = np.linspace(0.0, 1.0, n + 1)
    ys = _segments([0.0, ndd, 1.0 - ndd, 1.0], n) if ndd > 0 else np.linspace(0, 1, n + 1)

    def region(c):
        inside = (c[:, 1] > ndd) & (c[:, 1] < 1.0 - ndd)
        return np.where(inside, AIR, NDD)

    tags = {"bottom": "iy_plus", "right": "gamma2", "top": "iy_minus", "left": "gamma1"}
    return grid_mesh(xs, ys, tags, region=region, diagonal=diagonal, scale="micro")


def graded_breaks(a, b, focus, h_fine, h_coarse, width, growth=1.3):
    """1-D breakpoints on [a, b], spacing ``h_fine`` within ``width`` of
    ``focus`` growing geometrically to ``h_coarse`` elsewhere."""
    pts = [focus]
    x, h = focus, h_fine
    while x + h < b:
        x += h
        pts.append(x)
        if x - focus > width:
            h = min(h * growth, h_coarse)
    pts.append(b)
    x, h = focus, h_fine
    left = []
    while x - h > a:
        x -= h
        left.append(x)
        if focus - x > width:
            h = min(h * growth, h_coarse)
    left.append(a)
    pts = np.array(left[::-1] + pts)
    pts = np.unique(pts)
    # drop slivers at the ends
    if len(pts) > 2 and pts[-1] - pts[-2] < 0.3 * (pts[-2] - pts[-3]):
        pts = np.delete(pts, -2)
    if len(pts) > 2 and pts[1] - pts[0] < 0.3 * (pts[2] - pts[1]):
        pts = np.delete(pts, 1)
    return pts


def _with_breaks(pts, breaks):
    pts = np.asarray(pts, float)
    for b in breaks:
        i = np.argmin(np.abs(pts - b))
        h = np.diff(pts)[min(i, len(pts) - 2)]
        pts = pts[np.abs(pts - b) > 0.3 * h]
        pts = np.sort(np.append(pts, b))
    return pts


def graded_cell_mesh(focus, h_fine: float, h_coarse: float = 0.05, width: float = 0.05,
                     ndd: float = 0.1, growth: float = 1.3) -> TriMesh:
    """Unit cell refined around ``focus``, which is a mesh node."""
    fx, fy = float(focus[0]), float(focus[1])
    xs = graded_breaks(0.0, 1.0, fx, h_fine, h_coarse, width, growth)
    ys = graded_breaks(0.0, 1.0, fy, h_fine, h_coarse, width, growth)
    if ndd > 0:
        ys = _with_breaks(ys, [ndd, 1.0 - ndd])
    if not (np.any(xs == fx) and np.any(ys == fy)):
        raise MeshError("focus point too close to a fixed break line")

    def region(c):
        inside = (c[:, 1] > ndd) & (c[:, 1] < 1.0 - ndd)
        return np.where(inside, AIR, NDD)

    tags = {"bottom": "iy_plus", "right": "gamma2", "top": "iy_minus", "left": "gamma1"}
    return grid_mesh(xs, ys, tags, region=region, diagonal="mirror", scale="micro")


# ---------------------------------------------------------------- periodicity

class PeriodicPairingError(MeshError):
    pass


@dataclass(frozen=True)
class PeriodicMap:
    pairs: np.ndarray  # (k, 2) master, slave
    axis: int = 0

    def __len__(self):
        return len(self.pairs)


def pair_periodic_nodes(mesh: TriMesh, left_tag="gamma1", right_tag="gamma2",
                        axis: int = 0, tol: float = 1e-12) -> PeriodicMap:
    """Pair nodes of two opposite boundaries sorted by the other coordinate."""
    left = mesh.tagged_nodes(left_tag)
    right = mesh.tagged_nodes(right_tag)
    if len(left) == 0 or len(right) == 0:
        raise PeriodicPairingError(f"missing tag {left_tag!r} or {right_tag!r}")
    if len(left) != len(right):
        raise PeriodicPairingError(
            f"node count mismatch: {len(left)} on {left_tag}, {len(right)} on {right_tag}")
    other = 1 - axis
    lo = left[np.argsort(mesh.nodes[left, other], kind="stable")]
    ro = right[np.argsort(mesh.nodes[right, other], kind="stable")]
    d = np.abs(mesh.nodes[lo, other] - mesh.nodes[ro, other])
    scale = 1.0 if mesh.scale == "micro" else max(1.0, np.ptp(mesh.nodes[:, other]))
    if np.any(d > tol * scale):
        k = int(np.argmax(d))
        raise PeriodicPairingError(
            f"coordinate mismatch at node {int(lo[k])} {mesh.nodes[lo[k]].tolist()} "
            f"vs node {int(ro[k])} {mesh.nodes[ro[k]].tolist()}")
    return PeriodicMap(np.stack([lo, ro], axis=1), axis=axis)


# ---------------------------------------------------------------- conforming split

def _constrained_edges(mesh: TriMesh, design: np.ndarray):
    """Edges that nodes may only slide along: tagged edges and region borders
    between design and non-design triangles."""
    pairs, tri_edges = mesh.all_edges
    ne = len(pairs)
    cnt_d = np.bincount(tri_edges[design].ravel(), minlength=ne)
    cnt_n = np.bincount(tri_edges[~design].ravel(), minlength=ne)
    border = (cnt_d > 0) & (cnt_n > 0)
    keys = pairs[:, 0] * mesh.n_nodes + pairs[:, 1]
    lo, hi = _edge_key(mesh.edges[:, 0], mesh.edges[:, 1])
    tagged = np.isin(keys, lo * mesh.n_nodes + hi)
    return border | tagged


def _snap(mesh, phi, design, snap):
    """Move nodes that lie close to a cut onto the cut point (or just zero
    their level-set value when they may not move that way)."""
    nodes = mesh.nodes.copy()
    pairs, tri_edges = mesh.all_edges
    dedges = np.unique(tri_edges[design].ravel())
    e = pairs[dedges]
    pa, pb = phi[e[:, 0]], phi[e[:, 1]]
    cut = pa * pb < 0
    e, pa, pb = e[cut], pa[cut], pb[cut]
    cons_all = _constrained_edges(mesh, design)
    cons_e = cons_all[dedges][cut]
    t = pa / (pa - pb)
    L = np.linalg.norm(nodes[e[:, 1]] - nodes[e[:, 0]], axis=1)

    # constrained nodes and corners
    cnodes = pairs[cons_all]
    is_cons = np.zeros(mesh.n_nodes, bool)
    is_cons[cnodes.ravel()] = True
    dirs = nodes[cnodes[:, 1]] - nodes[cnodes[:, 0]]
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    corner = np.zeros(mesh.n_nodes, bool)
    ref = np.full((mesh.n_nodes, 2), np.nan)
    for k in range(2):
        for (n, d) in zip(cnodes[:, k], dirs):
            if np.isnan(ref[n, 0]):
                ref[n] = d
            elif abs(ref[n, 0] * d[1] - ref[n, 1] * d[0]) > 1e-9:
                corner[n] = True

    best = {}  # node -> (dist, target, may_move)
    for side in (0, 1):
        frac = t if side == 0 else 1.0 - t
        near = np.nonzero(frac < snap)[0]
        for k in near:
            n = int(e[k, side])
            dist = frac[k] * L[k]
            target = nodes[e[k, 0]] + t[k] * (nodes[e[k, 1]] - nodes[e[k, 0]])
            movable = (not is_cons[n]) or (cons_e[k] and not corner[n])
            cur = best.get(n)
            if cur is None:
                best[n] = [dist, target if movable else None]
            else:
                if movable and (cur[1] is None or dist < cur[0]):
                    cur[1] = target
                cur[0] = min(cur[0], dist)
    phi = phi.copy()
    for n in sorted(best):
        phi[n] = 0.0
        tgt = best[n][1]
        if tgt is not None:
            nodes[n] = tgt
    return nodes, phi, sorted(best)


def _enforce_periodic(mesh, phi, pmap):
    if pmap is None:
        return phi
    phi = phi.copy()
    m, s = pmap.pairs[:, 0], pmap.pairs[:, 1]
    zero = (phi[m] == 0.0) | (phi[s] == 0.0)
    phi[s] = phi[m]
    phi[m[zero]] = 0.0
    phi[s[zero]] = 0.0
    return phi


def _split(nodes, tris, regions, design, phi, mesh_edges, edge_tags):
    """Split every triangle crossed by the zero contour of ``phi``."""
    nn = len(nodes)
    a = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2]])
    b = np.concatenate([tris[:, 1], tris[:, 2], tris[:, 0]])
    dmask = np.concatenate([design] * 3)
    pa, pb = phi[a], phi[b]
    with np.errstate(invalid="ignore"):
        cutmask = dmask & (pa * pb < 0)
    lo, hi = _edge_key(a[cutmask], b[cutmask])
    keys = np.unique(lo * nn + hi)
    lo, hi = keys // nn, keys % nn
    t = phi[lo] / (phi[lo] - phi[hi])
    newpts = nodes[lo] + t[:, None] * (nodes[hi] - nodes[lo])
    newid = {int(k): nn + i for i, k in enumerate(keys)}
    nodes = np.vstack([nodes, newpts])
    phi = np.concatenate([phi, np.zeros(len(keys))])

    def cut_of(u, v):
        u, v = int(u), int(v)
        return newid.get(min(u, v) * nn + max(u, v))

    tri_cut = np.zeros(len(tris), bool)
    if len(keys):
        for k in range(3):
            l2, h2 = _edge_key(tris[:, k], tris[:, (k + 1) % 3])
            tri_cut |= np.isin(l2 * nn + h2, keys)
    out_t = [tris[~tri_cut]]
    out_r = [regions[~tri_cut]]
    for ti in np.nonzero(tri_cut)[0]:
        v = tris[ti]
        c = [cut_of(v[k], v[(k + 1) % 3]) for k in range(3)]
        ncut = sum(x is not None for x in c)
        if ncut == 1:
            k = [x is not None for x in c].index(True)
            v0, v1, v2 = v[(k + 2) % 3], v[k], v[(k + 1) % 3]
            m = c[k]
            sub = [(v0, v1, m), (v0, m, v2)]
        elif ncut == 2:
            k = [x is None for x in c].index(True)  # uncut edge k: v[k]-v[k+1]
            L = v[(k + 2) % 3]
            A, B = v[k], v[(k + 1) % 3]
            cB = c[(k + 1) % 3]  # on B-L
            cA = c[(k + 2) % 3]  # on L-A
            sub = [(L, cA, cB)]
            opt1 = [(cA, A, B), (cA, B, cB)]
            opt2 = [(cA, A, cB), (A, B, cB)]
            q1 = triangle_quality(nodes, np.array(opt1)).min()
            q2 = triangle_quality(nodes, np.array(opt2)).min()
            sub += opt1 if q1 >= q2 else opt2
        else:
            raise MeshError(f"triangle {ti} cut on all three edges")
        sub = np.array(sub, dtype=np.int64)
        out_t.append(sub)
        if design[ti]:
            out_r.append(np.where(phi[sub].mean(axis=1) > 0, ELASTIC, AIR))
        else:
            out_r.append(np.full(len(sub), regions[ti]))
    tris = np.concatenate(out_t).astype(np.int64)
    regions = np.concatenate(out_r).astype(np.int64)

    # split tagged edges that were cut
    ne, nt = [], []
    for (u, w), tg in zip(mesh_edges, edge_tags):
        m = cut_of(u, w)
        if m is None:
            ne.append((u, w))
            nt.append(tg)
        else:
            ne += [(u, m), (m, w)]
            nt += [tg, tg]
    return nodes, tris, regions, phi, np.array(ne, np.int64).reshape(-1, 2), np.array(nt, object)


def _smooth(nodes, tris, free, passes):
    """Jacobi Laplacian smoothing of ``free`` nodes, reverting any move that
    lowers the worst quality of the touched triangles."""
    if not np.any(free):
        return nodes
    nn = len(nodes)
    rows = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2], tris[:, 1], tris[:, 2], tris[:, 0]])
    cols = np.concatenate([tris[:, 1], tris[:, 2], tris[:, 0], tris[:, 0], tris[:, 1], tris[:, 2]])
    import scipy.sparse as sp
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nn, nn)).tocsr()
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    node_tris = sp.coo_matrix((np.ones(tris.size), (tris.ravel(), np.repeat(np.arange(len(tris)), 3))),
                              shape=(nn, len(tris))).tocsr()
    touched = np.unique(node_tris[np.nonzero(free)[0]].indices)
    sub = tris[touched]
    for _ in range(passes):
        q_old = triangle_quality(nodes, sub)
        prop = nodes.copy()
        avg = (adj @ nodes) / np.maximum(deg, 1)[:, None]
        prop[free] = avg[free]
        moving = free.copy()
        for _ in range(20):
            trial = np.where(moving[:, None], prop, nodes)
            q_new = triangle_quality(trial, sub)
            bad = q_new < q_old - 1e-14
            if not np.any(bad):
                break
            moving[sub[bad].ravel()] = False
        else:
            moving[:] = False
        nodes = np.where(moving[:, None], prop, nodes)
    return nodes


def conform_to_levelset(mesh: TriMesh, phi, snap: float = 0.05,
                        smooth_passes: int = 3, periodic: bool | None = None) -> TriMesh:
    """Return a mesh with an edge chain on the zero contour of the nodal P1
    level set ``phi``. Design triangles get AIR (phi<0) or ELASTIC (phi>0)
    labels; non-design triangles keep their label. Original node indices are
    preserved; new nodes are appended. ``point_data['phi']`` holds the
    level-set values used (zero on the interface)."""
    phi = np.asarray(getattr(phi, "phi", phi), dtype=float)
    if phi.shape != (mesh.n_nodes,):
        raise MeshError(f"phi has shape {phi.shape}, expected ({mesh.n_nodes},)")
    design = mesh.region_mask(DESIGN_REGIONS)
    dnodes = np.unique(mesh.tris[design])
    if np.any(~np.isfinite(phi[dnodes])):
        raise MeshError("phi must be finite on the design domain")
    phi = np.where(np.isfinite(phi), phi, -1.0)
    if periodic is None:
        periodic = "gamma1" in mesh.tags and "gamma2" in mesh.tags
    pmap = pair_periodic_nodes(mesh) if periodic else None
    phi = _enforce_periodic(mesh, phi, pmap)

    # values at round-off level would create zero-length cuts
    phi = np.where(np.abs(phi) <= 1e-12 * np.abs(phi[dnodes]).max(), 0.0, phi)
    nodes, phi, snapped = _snap(mesh, phi, design, snap)
    if pmap is not None:
        phi = _enforce_periodic(mesh, phi, pmap)
        m, s = pmap.pairs[:, 0], pmap.pairs[:, 1]
        # keep paired coordinates consistent (moves along the periodic sides)
        ax = pmap.axis
        moved = np.any(nodes[m] != mesh.nodes[m], axis=1) | np.any(nodes[s] != mesh.nodes[s], axis=1)
        agree = nodes[m, 1 - ax] == nodes[s, 1 - ax]
        undo = moved & ~agree
        nodes[m[undo]] = mesh.nodes[m[undo]]
        nodes[s[undo]] = mesh.nodes[s[undo]]

    # relabel design triangles that no cut passes through
    regions = mesh.regions.copy()
    pt = phi[mesh.tris]
    uncut = design & ~np.any(pt[:, :, None] * pt[:, None, :] < 0, axis=(1, 2))
    meanphi = pt.mean(axis=1)
    regions[uncut] = np.where(meanphi[uncut] > 0, ELASTIC, AIR)
    # a design triangle with every vertex on the contour keeps the phi>=0 rule
    allzero = uncut & np.all(pt == 0, axis=1)
    regions[allzero] = ELASTIC

    n0 = mesh.n_nodes
    nodes, tris, regions, phi, edges, tags = _split(
        nodes, mesh.tris, regions, design, phi, mesh.edges, mesh.edge_tags)
    new_design = np.isin(regions, DESIGN_REGIONS)

    # smoothing: old interior nodes of split triangles, off the contour
    touched_nodes = np.zeros(len(nodes), bool)
    newnode = np.zeros(len(nodes), bool)
    newnode[n0:] = True
    has_new = np.any(newnode[tris], axis=1)
    touched_nodes[tris[has_new].ravel()] = True
    tmp = TriMesh(nodes, tris, regions, edges, tags, mesh.scale)
    cons = _constrained_edges(tmp, new_design)
    pairs, _ = tmp.all_edges
    fixed = np.zeros(len(nodes), bool)
    fixed[pairs[cons].ravel()] = True
    free = touched_nodes & ~newnode & ~fixed & (phi != 0.0)
    free &= np.isin(np.arange(len(nodes)), tris[new_design].ravel())
    # nodes touching non-design triangles stay put
    free[tris[~new_design].ravel()] = False
    nodes = _smooth(nodes, tris, free, smooth_passes)

    out = TriMesh(nodes, tris, regions, edges, tags, mesh.scale,
                  {"phi": phi, **{k: v for k, v in mesh.point_data.items() if k != "phi"
                                  and np.shape(v)[:1] == (len(nodes),)}})
    if np.any(out.signed_areas <= 1e-12 * mesh.areas.sum()):
        i = int(np.argmin(out.signed_areas))
        raise MeshError(f"degenerate triangle {i} after split at {out.nodes[out.tris[i]].tolist()}")
    return out


def check_conforming(mesh: TriMesh) -> None:
    """Raise if a design triangle straddles the zero contour or carries a
    label inconsistent with its vertex signs."""
    phi = mesh.point_data.get("phi")
    if phi is None:
        return
    design = mesh.region_mask(DESIGN_REGIONS)
    pt = phi[mesh.tris[design]]
    straddle = np.any(pt > 0, axis=1) & np.any(pt < 0, axis=1)
    lab = mesh.regions[design]
    wrong = ((lab == ELASTIC) & np.any(pt < 0, axis=1)) | ((lab == AIR) & np.any(pt > 0, axis=1))
    bad = straddle | wrong
    if np.any(bad):
        i = int(np.nonzero(design)[0][np.argmax(bad)])
        raise MeshError(f"non-conforming mesh: triangle {i} label does not match phi")


def contour_length(mesh: TriMesh) -> float:
    """Length of the air/elastic interface edge chain."""
    pairs, tri_edges = mesh.all_edges
    ne = len(pairs)
    ce = np.bincount(tri_edges[mesh.regions == ELASTIC].ravel(), minlength=ne)
    ca = np.bincount(tri_edges[mesh.regions != ELASTIC].ravel(), minlength=ne)
    e = pairs[(ce > 0) & (ca > 0)]
    return float(np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1).sum())


# ---------------------------------------------------------------- VTK IO

_TAG_CODE = {t: i for i, t in enumerate(BOUNDARY_TAGS)}


def write_vtk(path, mesh: TriMesh, point_data: dict | None = None,
              cell_data: dict | None = None, title: str = "metasurf mesh") -> None:
    """Legacy ASCII VTK unstructured grid. Triangles are type 5; tagged edges
    follow as type 3 lines with region -1 and their tag code in ``edge_tag``."""
    pd = dict(mesh.point_data)
    pd.update(point_data or {})
    nt, ne = mesh.n_tris, len(mesh.edges)
    ncell = nt + ne
    f17 = "{:.17g}".format
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " "), "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_nodes} double"]
    lines += [f"{f17(x)} {f17(y)} 0" for x, y in mesh.nodes]
    lines.append(f"CELLS {ncell} {4 * nt + 3 * ne}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.tris]
    lines += [f"2 {a} {b}" for a, b in mesh.edges]
    lines.append(f"CELL_TYPES {ncell}")
    lines += ["5"] * nt + ["3"] * ne
    lines.append(f"CELL_DATA {ncell}")
    lines += ["SCALARS region int 1", "LOOKUP_TABLE default"]
    lines += [str(r) for r in mesh.regions] + ["-1"] * ne
    lines += ["SCALARS edge_tag int 1", "LOOKUP_TABLE default"]
    lines += ["-1"] * nt + [str(_TAG_CODE[t]) for t in mesh.edge_tags]
    for name, v in (cell_data or {}).items():
        v = np.asarray(v, float)
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f17(x) for x in v] + ["nan"] * ne
    if pd:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        for name, v in pd.items():
            v = np.asarray(v)
            if np.iscomplexobj(v):
                parts = {f"{name}_re": v.real, f"{name}_im": v.imag, f"{name}_abs": np.abs(v)}
            else:
                parts = {name: v}
            for nm, arr in parts.items():
                arr = np.asarray(arr, float)
                if arr.ndim == 2:
                    a3 = np.column_stack([arr, np.zeros(len(arr))]) if arr.shape[1] == 2 else arr
                    lines.append(f"VECTORS {nm} double")
                    lines += [" ".join(f17(x) for x in row) for row in a3]
                else:
                    lines += [f"SCALARS {nm} double 1", "LOOKUP_TABLE default"]
                    lines += [f17(x) for x in arr]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk(path, scale: str = "micro") -> TriMesh:
    """Read a file written by :func:`write_vtk` back into a TriMesh."""
    with open(path) as fh:
        tok = fh.read().split("\n")
    i = 0
    nodes = tris = None
    cells = types = None
    cdata, pdata = {}, {}
    section = None
    while i < len(tok):
        line = tok[i].strip()
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            nodes = np.array([list(map(float, tok[i + 1 + k].split()[:2])) for k in range(n)])
            i += n + 1
            continue
        if line.startswith("CELLS"):
            n = int(line.split()[1])
            cells = [list(map(int, tok[i + 1 + k].split()[1:])) for k in range(n)]
            i += n + 1
            continue
        if line.startswith("CELL_TYPES"):
            n = int(line.split()[1])
            types = np.array([int(tok[i + 1 + k]) for k in range(n)])
            i += n + 1
            continue
        if line.startswith("CELL_DATA"):
            section, count = cdata, int(line.split()[1])
        elif line.startswith("POINT_DATA"):
            section, count = pdata, int(line.split()[1])
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            vals = np.array([float(tok[i + 2 + k]) for k in range(count)])
            section[name] = vals
            i += count + 2
            continue
        elif line.startswith("VECTORS"):
            name = line.split()[1]
            vals = np.array([list(map(float, tok[i + 1 + k].split())) for k in range(count)])
            section[name] = vals[:, :2]
            i += count + 1
            continue
        i += 1
    if nodes is None or cells is None or types is None:
        raise MeshError(f"{path}: not a legacy unstructured grid")
    tri_m = types == 5
    tris = np.array([c for c, m in zip(cells, tri_m) if m], np.int64)
    edges = np.array([c for c, m in zip(cells, tri_m) if not m], np.int64).reshape(-1, 2)
    regions = cdata["region"][tri_m].astype(np.int64)
    codes = cdata.get("edge_tag", np.zeros(len(cells)))[~tri_m].astype(int)
    tags = np.array([BOUNDARY_TAGS[c] for c in codes], object)
    return TriMesh(nodes, tris, regions, edges, tags, scale, pdata)
