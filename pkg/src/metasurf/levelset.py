"""Clamped level-set design variable and its reaction-diffusion update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import AIR, DESIGN_REGIONS, ELASTIC, TriMesh, pair_periodic_nodes


@dataclass(frozen=True)
class LevelSetParams:
    K_phi: float = 1.0
    tau: float = 5e-4
    dt: float = 0.5

    def __post_init__(self):
        for k in ("K_phi", "tau", "dt"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")


@dataclass
class LevelSet:
    """Nodal values on the base mesh; nodes outside the design domain hold -1."""

    phi: np.ndarray
    mesh: TriMesh

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.shape != (self.mesh.n_nodes,):
            raise ValueError("phi must have one value per mesh node")

    @property
    def design_nodes(self) -> np.ndarray:
        return design_nodes(self.mesh)

    def save(self, path) -> None:
        np.save(path, self.phi, allow_pickle=False)

    @classmethod
    def load(cls, path, mesh: TriMesh) -> "LevelSet":
        return cls(np.load(path, allow_pickle=False), mesh)


def design_nodes(mesh: TriMesh) -> np.ndarray:
    return np.unique(mesh.tris[mesh.region_mask(DESIGN_REGIONS)])


def initialize(shape, mesh: TriMesh, width: float = 0.1) -> LevelSet:
    """``shape`` is ("circle", center, radius), a callable signed profile
    (positive inside), or a path to a saved phi array."""
    if isinstance(shape, (str, bytes)) or hasattr(shape, "__fspath__"):
        return LevelSet.load(shape, mesh)
    if isinstance(shape, tuple) and shape and shape[0] == "circle":
        _, center, radius = shape
        if not radius > 0:
            raise ValueError("circle radius must be positive")
        c = np.asarray(center, float)

        def shape(y):
            return radius - np.hypot(y[:, 0] - c[0], y[:, 1] - c[1])
    if not callable(shape):
        raise ValueError(f"unsupported initial shape {shape!r}")
    if not width > 0:
        raise ValueError("profile width must be positive")
    phi = np.full(mesh.n_nodes, -1.0)
    d = design_nodes(mesh)
    phi[d] = np.clip(shape(mesh.nodes[d]) / width, -1.0, 1.0)
    if "gamma1" in mesh.tags and "gamma2" in mesh.tags:
        pm = pair_periodic_nodes(mesh)
        phi[pm.pairs[:, 1]] = phi[pm.pairs[:, 0]]
    return LevelSet(phi, mesh)


def material_map(ls: LevelSet) -> np.ndarray:
    """Nodal characteristic function: 1 (elastic) where phi >= 0 in D, else 0."""
    chi = np.zeros(ls.mesh.n_nodes, dtype=np.int8)
    d = ls.design_nodes
    chi[d] = (ls.phi[d] >= 0).astype(np.int8)
    return chi


def element_labels(ls: LevelSet) -> np.ndarray:
    """Region per base triangle from the nodal characteristic function (majority vote)."""
    chi = material_map(ls)
    reg = ls.mesh.regions.copy()
    des = ls.mesh.region_mask(DESIGN_REGIONS)
    vote = chi[ls.mesh.tris].sum(axis=1) >= 2
    reg[des] = np.where(vote[des], ELASTIC, AIR)
    return reg


class LevelSetUpdater:
    """Implicit step (M + dt K_phi tau S) phi_new = M (phi - dt K_phi J').

    P1 on the design domain, periodic on gamma1/gamma2, natural (Neumann)
    elsewhere. The mass matrix is lumped, which keeps the diffusion step
    monotone; the factorization is reused while the base mesh is fixed."""

    def __init__(self, mesh: TriMesh, params: LevelSetParams = LevelSetParams()):
        self.mesh = mesh
        self.params = params
        pm = pair_periodic_nodes(mesh) if {"gamma1", "gamma2"} <= mesh.tags else None
        self.V = fem.TriSpace(mesh, 1, regions=DESIGN_REGIONS, periodic=pm)
        self.M = np.asarray(fem.mass(self.V).sum(axis=1)).ravel()
        self.S = fem.stiffness(self.V)
        p = params
        A = sp.diags(self.M) + (p.dt * p.K_phi * p.tau) * self.S
        self.lu = fem.Factorization(A.tocsc())
        self.nodes = np.nonzero(self.V.vertex_dof >= 0)[0]

    def _to_dofs(self, f):
        out = np.zeros(self.V.n_dofs)
        out[self.V.vertex_dof[self.nodes]] = f[self.nodes]
        return out

    def step(self, ls: LevelSet, jprime) -> LevelSet:
        jprime = np.asarray(jprime, float)
        if jprime.shape != (self.mesh.n_nodes,):
            raise ValueError("jprime must have one value per base mesh node")
        p = self.params
        rhs = self.M * (self._to_dofs(ls.phi) - p.dt * p.K_phi * self._to_dofs(jprime))
        x = np.clip(self.lu.solve(rhs), -1.0, 1.0)
        phi = ls.phi.copy()
        phi[self.nodes] = x[self.V.vertex_dof[self.nodes]]
        return LevelSet(phi, self.mesh)


def update(ls: LevelSet, jprime, params: LevelSetParams = LevelSetParams()) -> LevelSet:
    return LevelSetUpdater(ls.mesh, params).step(ls, jprime)
