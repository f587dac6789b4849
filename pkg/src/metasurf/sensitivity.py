"""Topological derivative of the objective over the design domain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import Multipliers
from .cell import CellSolution, MaterialPair, recovered_gradients

AIR_TO_ELASTIC = "air_to_elastic"
ELASTIC_TO_AIR = "elastic_to_air"


@dataclass
class SensitivityField:
    dT_air_to_elastic: np.ndarray
    dT_elastic_to_air: np.ndarray
    jprime: np.ndarray


def contrast(rho_i: float, rho_e: float) -> float:
    return 4 * np.pi * (rho_i - rho_e) / (rho_e * (rho_i + rho_e))


def _phases(materials: MaterialPair, direction: str):
    air = (materials.rho_air, materials.K_air)
    el = (materials.rho_elastic, materials.K_elastic)
    if direction == AIR_TO_ELASTIC:
        return el, air
    if direction == ELASTIC_TO_AIR:
        return air, el
    raise ValueError(f"unknown direction {direction!r}")


def _one_sided(g_air, g_el, use_air: bool):
    first, other = (g_air, g_el) if use_air else (g_el, g_air)
    return np.where(np.isnan(first), other, first)


def i_terms(grad_eta, grad_xi, rho_i, K_i, rho_e, K_e):
    """(I1, I2, I3, I4) at points with background gradients (n, 2)."""
    c = contrast(rho_i, rho_e)
    ge, gx = np.asarray(grad_eta), np.asarray(grad_xi)
    I1 = -c * (np.sum(ge * ge, axis=1) + 2 * ge[:, 0] + 1.0)
    I2 = -c * (np.sum(gx * ge, axis=1) + gx[:, 0])
    I3 = np.full(len(ge), 2 * np.pi * (1.0 / K_i - 1.0 / K_e))
    I4 = c * np.sum(gx * gx, axis=1)
    return I1, I2, I3, I4


def topological_derivative_field(cell_sol: CellSolution, mult: Multipliers,
                                 materials: MaterialPair = MaterialPair(),
                                 direction: str = AIR_TO_ELASTIC, grads=None) -> np.ndarray:
    """D_T J at every vertex of the cell mesh for inserting a small disk of
    the other phase; gradients are taken on the background-phase side."""
    (rho_i, K_i), (rho_e, K_e) = _phases(materials, direction)
    if grads is None:
        grads = {f: recovered_gradients(cell_sol, f) for f in ("eta", "xi")}
    use_air = direction == AIR_TO_ELASTIC
    ge = _one_sided(*grads["eta"], use_air)
    gx = _one_sided(*grads["xi"], use_air)
    I1, I2, I3, I4 = i_terms(ge, gx, rho_i, K_i, rho_e, K_e)
    return -(mult.lambda_A11 * I1 + mult.lambda_B1 * I2 + mult.lambda_Kinv * I3
             + mult.lambda_F * I4) / (2 * np.pi)


def map_to_jprime(dT_air_to_elastic, dT_elastic_to_air, phi, normalize: bool = True) -> np.ndarray:
    """Level-set source: -dT_ae where phi <= 0, +dT_ea where phi > 0,
    scaled to unit max norm."""
    phi = np.asarray(phi)
    j = np.where(phi <= 0, -np.asarray(dT_air_to_elastic), np.asarray(dT_elastic_to_air))
    if normalize:
        m = np.max(np.abs(j)) if j.size else 0.0
        if m > 0:
            j = j / m
    return j


def sensitivity_field(cell_sol: CellSolution, mult: Multipliers, phi, nodes=None,
                      materials: MaterialPair = MaterialPair()) -> SensitivityField:
    """Both derivative branches and J' sampled at ``nodes`` of the analysis
    mesh (the base-mesh vertices, which keep their indices after remeshing)."""
    grads = {f: recovered_gradients(cell_sol, f) for f in ("eta", "xi")}
    ae = topological_derivative_field(cell_sol, mult, materials, AIR_TO_ELASTIC, grads)
    ea = topological_derivative_field(cell_sol, mult, materials, ELASTIC_TO_AIR, grads)
    if nodes is not None:
        ae, ea = ae[nodes], ea[nodes]
    return SensitivityField(ae, ea, map_to_jprime(ae, ea, phi))
