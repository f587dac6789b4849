"""Macroscale adjoint problem and the Lagrange multipliers of the four coefficients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .cell import HomogenizedCoeffs
from .macro import MacroSolution
from .objective import ObjectiveSpec

ADJ_BLOCKS = ("Q_plus", "Q_minus", "q0", "Psi_plus", "Psi_minus")


@dataclass
class AdjointSolution:
    Q_plus: np.ndarray
    Q_minus: np.ndarray
    q0: np.ndarray
    Psi0_plus: np.ndarray
    Psi0_minus: np.ndarray
    residual: float = 0.0

    def nodal_fields(self, problem):
        out = np.full(problem.mesh.n_nodes, np.nan + 0j)
        for V, u in ((problem.Vp, self.Q_plus), (problem.Vm, self.Q_minus)):
            ok = V.vertex_dof >= 0
            out[ok] = u[V.vertex_dof[ok]]
        return {"adj_Q": out}


@dataclass(frozen=True)
class Multipliers:
    lambda_A11: float
    lambda_B1: float
    lambda_Kinv: float
    lambda_F: float

    def as_dict(self):
        return {"A11": self.lambda_A11, "B1": self.lambda_B1, "Kinv": self.lambda_Kinv,
                "F": self.lambda_F}

    def scaled(self, s: float) -> "Multipliers":
        return Multipliers(s * self.lambda_A11, s * self.lambda_B1, s * self.lambda_Kinv, s * self.lambda_F)


def adjoint_matrix(problem, co: HomogenizedCoeffs) -> sp.csr_matrix:
    """Adjoint weak forms tested with (Q~+, Q~-, q~, Psi~+, Psi~-)."""
    c = problem.cfg
    L = problem.line
    e = 1.0 / c.eps0
    w2 = c.omega ** 2
    Tp, Tm = problem.Tp, problem.Tm
    rows = [
        [problem.bulk["plus"], None, None, -e * (Tp.T @ L["M21"]), -0.5 * (Tp.T @ L["M21"])],
        [None, problem.bulk["minus"], None, e * (Tm.T @ L["M21"]), -0.5 * (Tm.T @ L["M21"])],
        [None, None, co.A11 * L["S22"] - w2 * co.Kinv * L["M22"], co.B1 * L["D21"], L["M21"]],
        [-(L["M12"] @ Tp), None, 0.5 * co.B1 * L["D12"] + e * L["M12"], -0.5 * co.F * L["M11"], None],
        [None, L["M12"] @ Tm, 0.5 * co.B1 * L["D12"] - e * L["M12"], -0.5 * co.F * L["M11"], None],
    ]
    return sp.bmat(rows, format="csr", dtype=complex)


def adjoint_rhs(state: MacroSolution, spec: ObjectiveSpec) -> np.ndarray:
    """Minus the Wirtinger derivative of J with respect to P-."""
    problem = state.problem
    b = np.zeros(sum(problem.sizes), complex)
    a, z = problem.blocks["P_minus"]
    for tag, wt in spec.weights().items():
        if tag not in state.cfg.outlet_tags:
            raise fem.AssemblyError(f"objective boundary {tag!r} absent from geometry")
        M = fem.boundary_mass(problem.Vm, tag)
        b[a:z] -= wt * (M @ np.conj(state.P_minus))
    return b


def solve_macro_adjoint(state: MacroSolution, coeffs: HomogenizedCoeffs | None = None, cfg=None,
                        objective: ObjectiveSpec | None = None) -> AdjointSolution:
    problem = state.problem
    coeffs = state.coeffs if coeffs is None else coeffs
    if objective is None:
        raise ValueError("objective specification required")
    A = adjoint_matrix(problem, coeffs)
    b = adjoint_rhs(state, objective)
    sys_ = fem.SparseSystem(A, b)
    if not np.any(b):
        y = np.zeros_like(b)
    else:
        y = fem.solve(sys_, check=1e-8)
    f = problem.split(y)
    return AdjointSolution(f["P_plus"], f["P_minus"], f["p0"], f["G_plus"], f["G_minus"],
                           sys_.residual(y) if np.any(b) else 0.0)


def lagrange_multipliers(state: MacroSolution, adj: AdjointSolution) -> Multipliers:
    problem = state.problem
    L = problem.line
    if len(adj.q0) != len(state.p0):
        raise ValueError("state and adjoint live on different interface discretizations")
    w2 = state.cfg.omega ** 2
    p0, q0, G = state.p0, adj.q0, state.G0_plus + state.G0_minus
    lam_A = 2 * np.real(q0 @ (L["S22"] @ p0))
    lam_B = 2 * np.real(0.5 * q0 @ (L["D21"] @ G) + adj.Psi0_plus @ (L["D12"] @ p0))
    lam_F = 2 * np.real(-0.5 * adj.Psi0_plus @ (L["M11"] @ G))
    lam_K = 2 * np.real(-w2 * q0 @ (L["M22"] @ p0))
    return Multipliers(float(lam_A), float(lam_B), float(lam_K), float(lam_F))
