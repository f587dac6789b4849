"""Unit-cell problems and the four interface coefficients."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import AIR, ELASTIC, NDD, MeshError, TriMesh, check_conforming, pair_periodic_nodes


@dataclass(frozen=True)
class MaterialPair:
    """Air and elastic (rho [kg/m^3], K [Pa]); defaults are air / aluminum."""

    rho_air: float = 1.2
    K_air: float = 1.42e5
    rho_elastic: float = 2643.0
    K_elastic: float = 6.87e10

    def __post_init__(self):
        for k in ("rho_air", "K_air", "rho_elastic", "K_elastic"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")

    def rho(self):
        return {AIR: self.rho_air, NDD: self.rho_air, ELASTIC: self.rho_elastic}

    def bulk(self):
        return {AIR: self.K_air, NDD: self.K_air, ELASTIC: self.K_elastic}

    def inv_rho(self):
        return {k: 1.0 / v for k, v in self.rho().items()}

    def inv_bulk(self):
        return {k: 1.0 / v for k, v in self.bulk().items()}


@dataclass(frozen=True)
class HomogenizedCoeffs:
    A11: float
    B1: float
    Kinv: float
    F: float

    def as_tuple(self):
        return (self.A11, self.B1, self.Kinv, self.F)

    def perturbed(self, name: str, h: float) -> "HomogenizedCoeffs":
        return replace(self, **{name: getattr(self, name) + h})

    @classmethod
    def air(cls, m: MaterialPair = MaterialPair()):
        return cls(1.0 / m.rho_air, 0.0, 1.0 / m.K_air, m.rho_air)


COEFF_NAMES = ("A11", "B1", "Kinv", "F")


@dataclass
class CellSolution:
    eta: np.ndarray
    xi: np.ndarray
    space: fem.TriSpace

    @property
    def mesh(self) -> TriMesh:
        return self.space.mesh

    def nodal(self):
        return self.space.nodal_values(self.eta), self.space.nodal_values(self.xi)

    def export_fields(self):
        eta, xi = self.nodal()
        return {"eta": eta, "xi": xi}


def _check_cell(mesh: TriMesh):
    for tag in ("iy_plus", "iy_minus", "gamma1", "gamma2"):
        if tag not in mesh.tags:
            raise MeshError(f"cell mesh lacks boundary tag {tag!r}")
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    if np.abs(lo).max() > 1e-12 or np.abs(hi - 1.0).max() > 1e-12:
        raise MeshError("cell mesh must span the unit square")
    check_conforming(mesh)


def solve_cell_problems(cell_mesh: TriMesh, materials: MaterialPair = MaterialPair(),
                        order: int = 2) -> CellSolution:
    """Periodic cell problems for eta and xi with mean-zero gauge."""
    _check_cell(cell_mesh)
    pmap = pair_periodic_nodes(cell_mesh, "gamma1", "gamma2")
    V = fem.TriSpace(cell_mesh, order, periodic=pmap)
    irho = materials.inv_rho()
    K = fem.stiffness(V, irho)
    m = fem.load(V, lambda x: np.ones(len(x)))
    A = sp.bmat([[K, m[:, None]], [m[None, :], None]], format="csc")
    b_eta = -fem.gradient_source(V, irho, axis=0)
    b_xi = -(fem.boundary_source(V, "iy_plus") - fem.boundary_source(V, "iy_minus"))
    rhs = np.zeros((V.n_dofs + 1, 2))
    rhs[:-1, 0] = b_eta
    rhs[:-1, 1] = b_xi
    sol = fem.Factorization(A).solve(rhs)
    return CellSolution(sol[:-1, 0].copy(), sol[:-1, 1].copy(), V)


def homogenized_coefficients(sol: CellSolution, materials: MaterialPair = MaterialPair()
                             ) -> HomogenizedCoeffs:
    V = sol.space
    irho = materials.inv_rho()
    dx = fem.gradient_source(V, irho, axis=0)
    one = fem.load(V, lambda x: np.ones(len(x)), irho)
    A11 = float(dx @ sol.eta + one.sum())
    B1 = float(dx @ sol.xi)
    Kinv = float((V.coef_per_elem(materials.inv_bulk()) * V.mesh.areas[V.tri_idx]).sum())
    F = -float(fem.boundary_integral(V, "iy_plus", sol.xi) - fem.boundary_integral(V, "iy_minus", sol.xi))
    return HomogenizedCoeffs(A11, B1, Kinv, F)


def b1_trace(sol: CellSolution) -> float:
    """B1 through the eta traces on the top and bottom surfaces."""
    V = sol.space
    return float(fem.boundary_integral(V, "iy_plus", sol.eta) - fem.boundary_integral(V, "iy_minus", sol.eta))


def a11_energy(sol: CellSolution, materials: MaterialPair = MaterialPair()) -> float:
    """A11 as the energy int (1/rho)|grad(eta + y1)|^2."""
    V = sol.space
    K = fem.stiffness(V, materials.inv_rho())
    dx = fem.gradient_source(V, materials.inv_rho(), axis=0)
    one = fem.load(V, lambda x: np.ones(len(x)), materials.inv_rho()).sum()
    return float(sol.eta @ (K @ sol.eta) + 2 * dx @ sol.eta + one)


def cell_coefficients(cell_mesh: TriMesh, materials: MaterialPair = MaterialPair()):
    sol = solve_cell_problems(cell_mesh, materials)
    return homogenized_coefficients(sol, materials), sol


# ---------------------------------------------------------------- gradients

def recovered_gradients(sol: CellSolution, field: str):
    """One-sided nodal gradient recovery.

    Returns (grad_air, grad_elastic): (n_nodes, 2) arrays holding the
    area-weighted mean of element gradients at each vertex using only
    elements of that material (NDD counts as air). Periodic partners pool
    their patches. NaN where a node touches no element of that material."""
    V = sol.space
    u = getattr(sol, field)
    mesh = V.mesh
    lam = np.eye(3)  # the three vertices
    g = V.gradients_at(u, lam)  # (m, 3, 2)
    area = mesh.areas[V.tri_idx]
    tri = mesh.tris[V.tri_idx]
    reg = mesh.regions[V.tri_idx]
    out = []
    for mat in (reg != ELASTIC, reg == ELASTIC):
        acc = np.zeros((mesh.n_nodes, 2))
        wsum = np.zeros(mesh.n_nodes)
        w = np.where(mat, area, 0.0)
        for k in range(3):
            np.add.at(acc, tri[:, k], w[:, None] * g[:, k])
            np.add.at(wsum, tri[:, k], w)
        if V.periodic is not None:
            m_, s_ = V.periodic.pairs[:, 0], V.periodic.pairs[:, 1]
            acc[m_] += acc[s_]
            wsum[m_] += wsum[s_]
            acc[s_] = acc[m_]
            wsum[s_] = wsum[m_]
        with np.errstate(invalid="ignore", divide="ignore"):
            out.append(np.where(wsum[:, None] > 0, acc / wsum[:, None], np.nan))
    return out[0], out[1]
