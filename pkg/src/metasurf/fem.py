"""Lagrange P1/P2 elements on triangles and on straight 1-D segments,
sparse assembly and direct solution."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import maximum_bipartite_matching

from .mesh import PeriodicMap, TriMesh

_CHUNK = 20000


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------- quadrature

def triangle_rule(degree: int = 5):
    """Barycentric points and weights (summing to 1) exact to ``degree``."""
    if degree <= 1:
        return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    if degree == 2:
        a, b = 2 / 3, 1 / 6
        pts = np.array([[a, b, b], [b, a, b], [b, b, a]])
        return pts, np.full(3, 1 / 3)
    if degree <= 5:
        return _dunavant5()
    raise ValueError(f"no triangle rule of degree {degree}")


def line_rule(n: int = 4):
    """Gauss-Legendre points on [0, 1] and weights summing to 1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# refine the degree-5 rule to full double precision once
def _dunavant5():
    s15 = np.sqrt(15.0)
    a1 = (6 - s15) / 21
    a2 = (6 + s15) / 21
    w1 = (155 - s15) / 1200
    w2 = (155 + s15) / 1200
    pts = [[1 / 3, 1 / 3, 1 / 3],
           [1 - 2 * a1, a1, a1], [a1, 1 - 2 * a1, a1], [a1, a1, 1 - 2 * a1],
           [1 - 2 * a2, a2, a2], [a2, 1 - 2 * a2, a2], [a2, a2, 1 - 2 * a2]]
    w = np.array([9 / 40, w1, w1, w1, w2, w2, w2])
    return np.array(pts), w


_Q5 = _dunavant5()


# ---------------------------------------------------------------- reference basis

def basis(order: int, lam: np.ndarray):
    """Values (nq, nloc) and barycentric derivatives (nq, nloc, 3)."""
    nq = lam.shape[0]
    if order == 1:
        d = np.broadcast_to(np.eye(3), (nq, 3, 3)).copy()
        return lam.copy(), d
    if order != 2:
        raise ValueError("order must be 1 or 2")
    l0, l1, l2 = lam.T
    val = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                    4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=1)
    d = np.zeros((nq, 6, 3))
    for k, lk in enumerate((l0, l1, l2)):
        d[:, k, k] = 4 * lk - 1
    d[:, 3, 0], d[:, 3, 1] = 4 * l1, 4 * l0
    d[:, 4, 1], d[:, 4, 2] = 4 * l2, 4 * l1
    d[:, 5, 2], d[:, 5, 0] = 4 * l0, 4 * l2
    return val, d


def line_basis(order: int, s: np.ndarray):
    """1-D values and d/ds on [0,1]; local order (left, right[, mid])."""
    if order == 1:
        return np.stack([1 - s, s], 1), np.stack([-np.ones_like(s), np.ones_like(s)], 1)
    v = np.stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)], 1)
    d = np.stack([4 * s - 3, 4 * s - 1, 4 - 8 * s], 1)
    return v, d


def _bary_grads(p):
    """Gradients of barycentric coordinates (m, 3, 2) and signed areas (m,)."""
    x, y = p[..., 0], p[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    g = np.empty(p.shape[:1] + (3, 2))
    g[:, 0, 0] = (y[:, 1] - y[:, 2]) / det
    g[:, 0, 1] = (x[:, 2] - x[:, 1]) / det
    g[:, 1, 0] = (y[:, 2] - y[:, 0]) / det
    g[:, 1, 1] = (x[:, 0] - x[:, 2]) / det
    g[:, 2, 0] = (y[:, 0] - y[:, 1]) / det
    g[:, 2, 1] = (x[:, 1] - x[:, 0]) / det
    return g, 0.5 * det


# ---------------------------------------------------------------- spaces

class TriSpace:
    """Continuous P1/P2 space on the triangles of ``regions`` (all if None),
    optionally with periodic DOF identification."""

    def __init__(self, mesh: TriMesh, order: int = 2, regions=None,
                 periodic: PeriodicMap | None = None):
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        self.mesh = mesh
        self.order = order
        self.nloc = 3 if order == 1 else 6
        if regions is None:
            self.tri_idx = np.arange(mesh.n_tris)
        else:
            self.tri_idx = np.nonzero(mesh.region_mask(regions))[0]
        if len(self.tri_idx) == 0:
            raise AssemblyError(f"no triangles in regions {regions}")
        self.regions = regions
        self.periodic = periodic
        canon = np.arange(mesh.n_nodes)
        if periodic is not None:
            canon[periodic.pairs[:, 1]] = periodic.pairs[:, 0]
        self.canon = canon
        t = canon[mesh.tris[self.tri_idx]]
        used = np.unique(t)
        vdof = np.full(mesh.n_nodes, -1, dtype=np.int64)
        vdof[used] = np.arange(len(used))
        vdof = vdof[canon]  # slaves inherit master dofs
        self.vertex_dof = vdof
        nv = len(used)
        elem = [vdof[mesh.tris[self.tri_idx]]]
        coords = [mesh.nodes[used]]
        if order == 2:
            nn = mesh.n_nodes
            tr = mesh.tris[self.tri_idx]
            keys = []
            for k in range(3):
                a, b = canon[tr[:, k]], canon[tr[:, (k + 1) % 3]]
                keys.append(np.minimum(a, b) * nn + np.maximum(a, b))
            keys = np.stack(keys, 1)
            uniq, inv = np.unique(keys, return_inverse=True)
            elem.append(nv + inv.reshape(keys.shape))
            self._edge_keys = uniq
            # midpoint coordinates from the first occurrence (master side)
            flat = inv.ravel()
            order_ = np.argsort(flat, kind="stable")
            first_pos = order_[np.searchsorted(flat[order_], np.arange(len(uniq)))]
            ti, k = np.divmod(first_pos, 3)
            a, b = tr[ti, k], tr[ti, (k + 1) % 3]
            # prefer the canonical (master) node coordinates
            mid = 0.5 * (mesh.nodes[canon[a]] + mesh.nodes[canon[b]])
            coords.append(mid)
        self.elem_dofs = np.concatenate(elem, axis=1) if order == 2 else elem[0]
        self.dof_coords = np.concatenate(coords)
        self.n_dofs = len(self.dof_coords)
        self.n_vertex_dofs = nv

    def edge_dofs(self, edges: np.ndarray) -> np.ndarray:
        """Local dofs (k, order+1) for mesh edges: (a, b[, mid])."""
        edges = np.asarray(edges).reshape(-1, 2)
        va = self.vertex_dof[edges[:, 0]]
        vb = self.vertex_dof[edges[:, 1]]
        if np.any(va < 0) or np.any(vb < 0):
            raise AssemblyError("edge not supported by this space")
        if self.order == 1:
            return np.stack([va, vb], 1)
        nn = self.mesh.n_nodes
        a, b = self.canon[edges[:, 0]], self.canon[edges[:, 1]]
        keys = np.minimum(a, b) * nn + np.maximum(a, b)
        pos = np.searchsorted(self._edge_keys, keys)
        pos = np.minimum(pos, len(self._edge_keys) - 1)
        if np.any(self._edge_keys[pos] != keys):
            raise AssemblyError("edge not supported by this space")
        return np.stack([va, vb, self.n_vertex_dofs + pos], 1)

    def nodal_values(self, u: np.ndarray) -> np.ndarray:
        """Values at mesh vertices (NaN outside the support)."""
        out = np.full(self.mesh.n_nodes, np.nan, dtype=np.result_type(u, float))
        ok = self.vertex_dof >= 0
        out[ok] = u[self.vertex_dof[ok]]
        return out

    def interpolate(self, f) -> np.ndarray:
        return np.asarray(f(self.dof_coords))

    # -- element geometry
    def geometry(self, idx=None):
        tri = self.mesh.tris[self.tri_idx if idx is None else self.tri_idx[idx]]
        g, area = _bary_grads(self.mesh.nodes[tri])
        return g, area

    def gradients_at(self, u, lam) -> np.ndarray:
        """Gradient of ``u`` at barycentric points ``lam`` (m, nq, 2)."""
        _, dl = basis(self.order, np.atleast_2d(lam))
        g, _ = self.geometry()
        gphi = np.einsum("qik,mkd->mqid", dl, g)
        return np.einsum("mqid,mi->mqd", gphi, u[self.elem_dofs])

    def values_at(self, u, lam) -> np.ndarray:
        v, _ = basis(self.order, np.atleast_2d(lam))
        return u[self.elem_dofs] @ v.T

    def coef_per_elem(self, coef) -> np.ndarray:
        return _coef(self, coef)


def _coef(space: TriSpace, coef) -> np.ndarray:
    m = len(space.tri_idx)
    if coef is None:
        return np.ones(m)
    if isinstance(coef, Mapping):
        reg = space.mesh.regions[space.tri_idx]
        vals = np.empty(m, dtype=np.result_type(*coef.values(), float))
        found = np.zeros(m, bool)
        for r, v in coef.items():
            sel = reg == r
            vals[sel] = v
            found |= sel
        if not np.all(found):
            missing = sorted(set(reg[~found].tolist()))
            raise AssemblyError(f"no coefficient for region(s) {missing}")
        return vals
    arr = np.asarray(coef)
    if arr.ndim == 0:
        return np.full(m, arr[()])
    if arr.shape[0] == space.mesh.n_tris:
        return arr[space.tri_idx]
    if arr.shape[0] == m:
        return arr
    raise AssemblyError(f"coefficient array of length {arr.shape[0]} matches neither mesh nor support")


def _chunks(m):
    for s in range(0, m, _CHUNK):
        yield slice(s, min(m, s + _CHUNK))


def _coo(rows, cols, vals, shape):
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=shape).tocsr()


def mass(trial: TriSpace, coef=None, test: TriSpace | None = None) -> sp.csr_matrix:
    """Matrix of int c * v_i * u_j (rows: test, columns: trial)."""
    test = trial if test is None else test
    _same_support(trial, test)
    lam, w = _Q5
    vu, _ = basis(trial.order, lam)
    vv, _ = basis(test.order, lam)
    c = _coef(trial, coef)
    local = np.einsum("q,qi,qj->ij", w, vv, vu)
    _, area = trial.geometry()
    vals = (c * np.abs(area))[:, None, None] * local[None]
    r = np.repeat(test.elem_dofs, trial.nloc, axis=1)
    cl = np.tile(trial.elem_dofs, (1, test.nloc))
    return _coo([r.ravel()], [cl.ravel()], [vals.reshape(len(c), -1).ravel()],
                (test.n_dofs, trial.n_dofs))


def stiffness(trial: TriSpace, coef=None, test: TriSpace | None = None) -> sp.csr_matrix:
    """Matrix of int c * grad v_i . grad u_j."""
    test = trial if test is None else test
    _same_support(trial, test)
    lam, w = _Q5
    _, du = basis(trial.order, lam)
    _, dv = basis(test.order, lam)
    c = _coef(trial, coef)
    rows, cols, vals = [], [], []
    for s in _chunks(len(c)):
        g, area = trial.geometry(s)
        gu = np.einsum("qik,mkd->mqid", du, g)
        gv = np.einsum("qik,mkd->mqid", dv, g)
        ke = np.einsum("q,mqid,mqjd->mij", w, gv, gu) * (c[s] * np.abs(area))[:, None, None]
        rows.append(np.repeat(test.elem_dofs[s], trial.nloc, axis=1).ravel())
        cols.append(np.tile(trial.elem_dofs[s], (1, test.nloc)).ravel())
        vals.append(ke.reshape(ke.shape[0], -1).ravel())
    return _coo(rows, cols, vals, (test.n_dofs, trial.n_dofs))


def gradient_source(test: TriSpace, coef=None, axis: int = 0) -> np.ndarray:
    """Vector of int c * d v_i / d x_axis."""
    lam, w = _Q5
    _, dv = basis(test.order, lam)
    c = _coef(test, coef)
    g, area = test.geometry()
    gv = np.einsum("qik,mkd->mqid", dv, g)[..., axis]
    fe = np.einsum("q,mqi->mi", w, gv) * (c * np.abs(area))[:, None]
    out = np.zeros(test.n_dofs, dtype=fe.dtype)
    np.add.at(out, test.elem_dofs.ravel(), fe.ravel())
    return out


def load(test: TriSpace, f, coef=None) -> np.ndarray:
    """Vector of int c * f * v_i with ``f`` a function of points (n, 2)."""
    lam, w = _Q5
    vv, _ = basis(test.order, lam)
    tri = test.mesh.tris[test.tri_idx]
    p = test.mesh.nodes[tri]
    xq = np.einsum("qk,mkd->mqd", lam, p)
    fq = np.asarray(f(xq.reshape(-1, 2))).reshape(xq.shape[:2])
    c = _coef(test, coef)
    _, area = test.geometry()
    fe = np.einsum("q,mq,qi->mi", w, fq, vv) * (c * np.abs(area))[:, None]
    out = np.zeros(test.n_dofs, dtype=fe.dtype)
    np.add.at(out, test.elem_dofs.ravel(), fe.ravel())
    return out


def integrate(space: TriSpace, u, coef=None) -> complex | float:
    """int c * u over the support."""
    return load(space, lambda x: np.ones(len(x)), coef) @ u


def _same_support(a: TriSpace, b: TriSpace):
    if a.mesh is not b.mesh or not np.array_equal(a.tri_idx, b.tri_idx):
        raise AssemblyError("trial and test spaces must share their triangles")


def _tag_edges(space: TriSpace, tag: str) -> np.ndarray:
    if tag not in space.mesh.tags:
        raise AssemblyError(f"boundary tag {tag!r} not present in mesh")
    return space.mesh.tagged_edges(tag)


def boundary_mass(space: TriSpace, tag: str | Iterable[str], coef=1.0) -> sp.csr_matrix:
    """Matrix of int_tag c * v_i * u_j ds."""
    tags = [tag] if isinstance(tag, str) else list(tag)
    s, w = line_rule(4)
    v, _ = line_basis(space.order, s)
    local = np.einsum("q,qi,qj->ij", w, v, v)
    rows, cols, vals = [], [], []
    for tg in tags:
        e = _tag_edges(space, tg)
        d = space.edge_dofs(e)
        L = np.linalg.norm(np.diff(space.mesh.nodes[e], axis=1)[:, 0], axis=1)
        n = d.shape[1]
        rows.append(np.repeat(d, n, axis=1).ravel())
        cols.append(np.tile(d, (1, n)).ravel())
        vals.append((coef * L[:, None, None] * local[None]).ravel())
    return _coo(rows, cols, vals, (space.n_dofs, space.n_dofs))


def boundary_source(space: TriSpace, tag: str | Iterable[str], g=1.0) -> np.ndarray:
    """Vector of int_tag g * v_i ds (``g`` constant or function of points)."""
    tags = [tag] if isinstance(tag, str) else list(tag)
    s, w = line_rule(4)
    v, _ = line_basis(space.order, s)
    out = np.zeros(space.n_dofs, dtype=complex if np.iscomplexobj(g) else float)
    for tg in tags:
        e = _tag_edges(space, tg)
        d = space.edge_dofs(e)
        pa, pb = space.mesh.nodes[e[:, 0]], space.mesh.nodes[e[:, 1]]
        L = np.linalg.norm(pb - pa, axis=1)
        if callable(g):
            xq = pa[:, None, :] + s[None, :, None] * (pb - pa)[:, None, :]
            gq = np.asarray(g(xq.reshape(-1, 2))).reshape(len(e), len(s))
        else:
            gq = np.full((len(e), len(s)), g)
        fe = np.einsum("q,mq,qi->mi", w, gq, v) * L[:, None]
        out = out.astype(np.result_type(out, fe))
        np.add.at(out, d.ravel(), fe.ravel())
    return out


def boundary_integral(space: TriSpace, tag, u, coef=1.0):
    """int_tag c * u ds."""
    return boundary_source(space, tag, coef) @ u


# ---------------------------------------------------------------- 1-D spaces

class LineSpace:
    """P1/P2 space on a straight interface parameterized by one coordinate."""

    def __init__(self, x: np.ndarray, order: int = 2, axis: int = 0, offset: float = 0.0):
        x = np.asarray(x, dtype=float)
        if np.any(np.diff(x) <= 0):
            raise AssemblyError("line nodes must be strictly increasing")
        self.x = x
        self.order = order
        self.axis = axis
        self.offset = offset
        ne = len(x) - 1
        self.n_elems = ne
        left = np.arange(ne)
        if order == 1:
            self.elem_dofs = np.stack([left, left + 1], 1)
            self.dof_x = x.copy()
        else:
            self.elem_dofs = np.stack([left, left + 1, len(x) + left], 1)
            self.dof_x = np.concatenate([x, 0.5 * (x[:-1] + x[1:])])
        self.n_dofs = len(self.dof_x)
        self.h = np.diff(x)

    def interpolate(self, f) -> np.ndarray:
        return np.asarray(f(self.dof_x))

    def values_at(self, u, s):
        v, _ = line_basis(self.order, np.atleast_1d(s))
        return u[self.elem_dofs] @ v.T

    def derivative_at(self, u, s):
        _, d = line_basis(self.order, np.atleast_1d(s))
        return (u[self.elem_dofs] @ d.T) / self.h[:, None]


def line_matrix(test: LineSpace, trial: LineSpace, dtest: int = 0, dtrial: int = 0,
                coef=1.0) -> sp.csr_matrix:
    """Matrix of int c * (d^dtest v_i)(d^dtrial u_j) dx over the line."""
    if not np.array_equal(test.x, trial.x):
        raise AssemblyError("line spaces must share their nodes")
    s, w = line_rule(4)
    vv, dv = line_basis(test.order, s)
    vu, du = line_basis(trial.order, s)
    a = dv if dtest else vv
    b = du if dtrial else vu
    local = np.einsum("q,qi,qj->ij", w, a, b)
    h = test.h
    scale = h ** (1 - dtest - dtrial)
    vals = coef * scale[:, None, None] * local[None]
    nt, nu = test.elem_dofs.shape[1], trial.elem_dofs.shape[1]
    r = np.repeat(test.elem_dofs, nu, axis=1)
    c = np.tile(trial.elem_dofs, (1, nt))
    return _coo([r.ravel()], [c.ravel()], [vals.ravel()], (test.n_dofs, trial.n_dofs))


def line_load(test: LineSpace, g=1.0) -> np.ndarray:
    s, w = line_rule(4)
    v, _ = line_basis(test.order, s)
    fe = (w @ v)[None, :] * test.h[:, None] * g
    out = np.zeros(test.n_dofs, dtype=np.result_type(fe))
    np.add.at(out, test.elem_dofs.ravel(), fe.ravel())
    return out


def trace_matrix(space: TriSpace, tag: str, line: LineSpace, tol: float = 1e-9) -> sp.csr_matrix:
    """Selection matrix T with (T u)_k = trace of ``u`` at line dof k.

    The tagged edges must coincide with the line elements."""
    if space.order != line.order:
        raise AssemblyError("trace requires equal orders")
    e = _tag_edges(space, tag)
    # keep the side of the tag that this space supports
    e = e[(space.vertex_dof[e[:, 0]] >= 0) & (space.vertex_dof[e[:, 1]] >= 0)]
    ax = line.axis
    xa = space.mesh.nodes[e[:, 0], ax]
    xb = space.mesh.nodes[e[:, 1], ax]
    swap = xa > xb
    e = np.where(swap[:, None], e[:, ::-1], e)
    xa = np.minimum(xa, xb)
    k = np.searchsorted(line.x, xa + 0.5 * tol * max(1.0, np.ptp(line.x)), side="right") - 1
    k = np.clip(k, 0, line.n_elems - 1)
    span = max(1.0, np.ptp(line.x))
    xr = space.mesh.nodes[e[:, 1], ax]
    ok = (np.abs(line.x[k] - xa) < tol * span) & (np.abs(line.x[k + 1] - xr) < tol * span)
    if not np.all(ok) or len(np.unique(k)) != line.n_elems or len(k) != line.n_elems:
        bad = np.nonzero(~ok)[0]
        where = space.mesh.nodes[e[bad[0], 0]].tolist() if len(bad) else "count mismatch"
        raise AssemblyError(f"edges tagged {tag!r} do not match the line mesh at {where}")
    d2 = space.edge_dofs(e)
    d1 = line.elem_dofs[k]
    T = sp.coo_matrix((np.ones(d1.size), (d1.ravel(), d2.ravel())),
                      shape=(line.n_dofs, space.n_dofs)).tocsr()
    T.data[:] = 1.0  # shared vertices are listed twice
    return T


# ---------------------------------------------------------------- systems

@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    blocks: dict = field(default_factory=dict)  # name -> (start, stop)

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        n = self.matrix.shape[1]
        if not self.blocks:
            self.blocks = {"u": (0, n)}
        edges = sorted(self.blocks.values())
        pos = 0
        for a, b in edges:
            if a != pos or b < a:
                raise AssemblyError("block layout does not partition the unknowns")
            pos = b
        if pos != n:
            raise AssemblyError("block layout does not cover the unknowns")

    @property
    def n(self):
        return self.matrix.shape[0]

    def block(self, x, name):
        a, b = self.blocks[name]
        return x[a:b]

    def zero_rows(self):
        A = self.matrix.copy()
        A.eliminate_zeros()
        return np.nonzero(np.diff(A.indptr) == 0)[0]

    def residual(self, x) -> float:
        r = self.matrix @ x - self.rhs
        nb = np.abs(self.rhs).max()
        return float(np.abs(r).max() / (nb if nb > 0 else 1.0))

    def dump(self, path):
        scipy.io.mmwrite(str(path), self.matrix)


class Factorization:
    """Sparse LU of a square matrix, reusable for several right-hand sides."""

    def __init__(self, A, permc_spec: str = "MMD_AT_PLUS_A"):
        A = sp.csc_matrix(A)
        self.A = A
        try:
            # A + A^T minimum degree suits the structurally symmetric FE systems here
            self.lu = spla.splu(A, permc_spec=permc_spec)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed ({exc}); {_locate_singularity(A)}") from None

    def solve(self, b, trans="N"):
        x = self.lu.solve(np.asarray(b), trans=trans)
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite solution; {_locate_singularity(self.A)}")
        return x


def _locate_singularity(A) -> str:
    A = sp.csr_matrix(A)
    A.eliminate_zeros()
    zr = np.nonzero(np.diff(A.indptr) == 0)[0]
    if len(zr):
        return f"zero pivot at row {int(zr[0])} (empty row)"
    zc = np.nonzero(np.diff(A.tocsc().indptr) == 0)[0]
    if len(zc):
        return f"zero pivot at column {int(zc[0])} (empty column)"
    pattern = sp.csr_matrix((np.ones(A.nnz), A.indices, A.indptr), shape=A.shape)
    match = maximum_bipartite_matching(pattern, perm_type="column")
    un = np.nonzero(match < 0)[0]
    if len(un):
        return f"zero pivot at row {int(un[0])} (structurally singular)"
    return "numerically singular matrix"


def solve(system: SparseSystem, check: float | None = 1e-10) -> np.ndarray:
    """Direct sparse LU solve with a relative residual check."""
    if system.matrix.shape[0] != system.matrix.shape[1]:
        raise SolverError("system matrix must be square")
    x = Factorization(system.matrix).solve(system.rhs)
    if check is not None:
        res = system.residual(x)
        if res > check:
            raise SolverError(f"residual {res:.3e} exceeds {check:.1e}")
    return x


# ---------------------------------------------------------------- descriptor assembly

@dataclass(frozen=True)
class Term:
    """One weak-form term.

    kind: mass | stiffness | gradient_source | boundary_mass | boundary_source
    | trace_coupling. ``tag`` names the boundary, ``axis`` the derivative
    direction, ``line`` the 1-D space for trace coupling (tested by the 2-D
    trace, trial on the line).
    """

    kind: str
    coef: object = 1.0
    tag: str | None = None
    axis: int = 0
    line: LineSpace | None = None


def assemble(form: list[Term], trial, test: TriSpace | None = None,
             coefficients: Mapping | None = None) -> SparseSystem:
    """Assemble a single-block system from a list of terms.

    ``trial`` is a TriSpace, or a LineSpace when the form only holds trace
    couplings. Coefficients given as strings are looked up in
    ``coefficients``."""
    if test is None:
        if isinstance(trial, LineSpace):
            raise AssemblyError("a two-dimensional test space is required")
        test = trial
    coefficients = coefficients or {}
    A = sp.csr_matrix((test.n_dofs, trial.n_dofs))
    b = np.zeros(test.n_dofs)
    for t in form:
        c = coefficients[t.coef] if isinstance(t.coef, str) else t.coef
        if t.kind == "trace_coupling":
            if t.line is None or t.tag is None:
                raise AssemblyError("trace coupling needs a tag and a line test space")
            A = A + block_trace(test, t.tag, t.line, trial, c)
            continue
        if isinstance(trial, LineSpace) and t.kind in ("mass", "stiffness"):
            raise AssemblyError(f"{t.kind} needs a two-dimensional trial space")
        if t.kind == "mass":
            A = A + mass(trial, c, test)
        elif t.kind == "stiffness":
            A = A + stiffness(trial, c, test)
        elif t.kind == "gradient_source":
            b = b + gradient_source(test, c, t.axis)
        elif t.kind == "boundary_mass":
            A = A + boundary_mass(test, t.tag, c)
        elif t.kind == "boundary_source":
            b = b + boundary_source(test, t.tag, c)
        else:
            raise AssemblyError(f"unsupported term kind {t.kind!r}")
    return SparseSystem(A, b)


def block_trace(space: TriSpace, tag: str, line_test: LineSpace, line_trial: LineSpace,
                coef=1.0) -> sp.csr_matrix:
    """Matrix of int_tag c * trace(v_i) * u_j for 2-D test v, 1-D trial u."""
    T = trace_matrix(space, tag, line_test)
    return (T.T @ line_matrix(line_test, line_trial, coef=coef)).tocsr()
