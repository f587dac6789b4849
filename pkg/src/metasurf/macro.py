"""Homogenized macroscale problem: two Helmholtz half-domains coupled through
an interface line carrying (p0, G+, G-)."""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import fem
from .cell import HomogenizedCoeffs
from .mesh import OMEGA_MINUS, OMEGA_PLUS, TriMesh, _segments, grid_mesh

BLOCKS = ("P_plus", "P_minus", "p0", "G_plus", "G_minus")


@dataclass(frozen=True)
class MacroConfig:
    """Macroscale setup. Lengths in meters.

    Omega+ (incident side) lies below the layer, Omega- above it; the layer
    of thickness ``kappa * eps0`` is centered on x2 = 0. With
    ``collapse_gap`` the two half-domains touch at x2 = 0.
    """

    k0: float = 25.0
    P_in: float = 1.0
    eps0: float = 0.01
    kappa: float = 1.0
    rho0: float = 1.2
    K0: float = 1.42e5
    geometry: str = "design"
    width: float = 0.5
    depth: float = 0.5
    outlet_width: float = 0.2
    wall_width: float = 0.1
    h: float = 0.0125
    collapse_gap: bool = False
    inlet: tuple | None = None  # (start, end) along x1; None = template default
    outlet: tuple | None = None  # validation outlet span; None = full width

    @property
    def inlet_span(self) -> tuple:
        if self.inlet is not None:
            return tuple(float(v) for v in self.inlet)
        if self.geometry == "design":
            return (0.0, self.outlet_width)
        return (0.0, self.width)

    @property
    def outlet_span(self) -> tuple:
        if self.outlet is not None:
            return tuple(float(v) for v in self.outlet)
        return (0.0, self.width)

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if not (self.k0 > 0 and self.rho0 > 0 and self.K0 > 0):
            raise ValueError("k0, rho0 and K0 must be positive")
        if self.geometry not in ("design", "validation"):
            raise ValueError(f"unknown geometry template {self.geometry!r}")
        if self.geometry == "design" and 2 * self.outlet_width + self.wall_width > self.width + 1e-12:
            raise ValueError("outlets and wall do not fit the width")
        a, b = self.inlet_span
        if not (0.0 <= a < b <= self.width + 1e-12):
            raise ValueError("inlet segment must lie on the lower boundary")
        a, b = self.outlet_span
        if not (0.0 <= a < b <= self.width + 1e-12):
            raise ValueError("outlet segment must lie on the upper boundary")
        if self.outlet is not None and self.geometry == "design":
            raise ValueError("the design template has fixed outlets")

    @property
    def c0(self) -> float:
        return float(np.sqrt(self.K0 / self.rho0))

    @property
    def omega(self) -> float:
        return self.k0 * self.c0

    @property
    def freq_hz(self) -> float:
        return self.omega / (2 * np.pi)

    @property
    def delta(self) -> float:
        return self.kappa * self.eps0

    @property
    def n_cells(self) -> int:
        return int(round(self.width / self.eps0))

    @property
    def outlet_tags(self) -> tuple:
        return ("out",) if self.geometry == "validation" else ("out1", "out2")

    @classmethod
    def from_omega(cls, omega: float, **kw):
        rho0 = kw.get("rho0", 1.2)
        K0 = kw.get("K0", 1.42e5)
        return cls(k0=omega * np.sqrt(rho0 / K0), **kw)

    def with_(self, **kw) -> "MacroConfig":
        return replace(self, **kw)

    def incident_power(self) -> float:
        """Power of the incident plane wave through the inlet (W/m)."""
        a, b = self.inlet_span
        return (b - a) * abs(self.P_in) ** 2 / (2 * self.rho0 * self.c0)


def outlet_breaks(cfg: MacroConfig) -> list:
    """Breakpoints along x1 that every mesh of the template must contain."""
    pts = [0.0, cfg.width, *cfg.inlet_span]
    if cfg.geometry == "validation":
        pts += list(cfg.outlet_span)
    else:
        pts += [cfg.outlet_width, cfg.outlet_width + cfg.wall_width, cfg.width - cfg.outlet_width]
    return sorted(set(np.round(pts, 12).tolist()))


def inlet_tagger(cfg: MacroConfig):
    a, b = cfg.inlet_span
    if a <= 0.0 and b >= cfg.width - 1e-12:
        return "in"

    def rule(mid):
        x = mid[:, 0]
        return np.where((x > a) & (x < b), "in", "wall").astype(object)
    return rule


def outlet_tagger(cfg: MacroConfig):
    """Tag rule for the far boundary of Omega-: out1 on the left outlet,
    out2 on the right one, walls in between."""
    if cfg.geometry == "validation":
        lo, hi = cfg.outlet_span
        if lo <= 0.0 and hi >= cfg.width - 1e-12:
            return "out"

        def span(mid):
            x = mid[:, 0]
            return np.where((x > lo) & (x < hi), "out", "wall").astype(object)
        return span
    a = cfg.outlet_width
    c = cfg.width - cfg.outlet_width

    def rule(mid):
        x = mid[:, 0]
        return np.where(x < a, "out1", np.where(x > c, "out2", "wall")).astype(object)
    return rule


def interface_breaks(cfg: MacroConfig) -> np.ndarray:
    n = max(1, int(round(cfg.width / cfg.h)))
    return _segments(outlet_breaks(cfg), n) * 1.0


def build_macro_mesh(cfg: MacroConfig, xs: np.ndarray | None = None) -> TriMesh:
    """Both half-domains in one mesh with separate node layers on the interface."""
    xs = interface_breaks(cfg) if xs is None else np.asarray(xs, float)
    ny = max(1, int(round(cfg.depth / cfg.h)))
    g = 0.0 if cfg.collapse_gap else 0.5 * cfg.delta
    yp = np.linspace(-g - cfg.depth, -g, ny + 1)
    ym = np.linspace(g, g + cfg.depth, ny + 1)
    lower = grid_mesh(xs, yp, {"bottom": inlet_tagger(cfg), "right": "wall", "top": "gamma0", "left": "wall"},
                      region=OMEGA_PLUS, scale="macro")
    upper = grid_mesh(xs, ym, {"bottom": "gamma0", "right": "wall", "top": outlet_tagger(cfg),
                               "left": "wall"}, region=OMEGA_MINUS, scale="macro")
    return merge_meshes(lower, upper)


def merge_meshes(*meshes: TriMesh) -> TriMesh:
    """Concatenate meshes without identifying any nodes."""
    off = 0
    nodes, tris, regs, edges, tags = [], [], [], [], []
    for m in meshes:
        nodes.append(m.nodes)
        tris.append(m.tris + off)
        regs.append(m.regions)
        edges.append(m.edges + off)
        tags.append(m.edge_tags)
        off += m.n_nodes
    return TriMesh(np.vstack(nodes), np.vstack(tris), np.concatenate(regs),
                   np.vstack(edges), np.concatenate(tags), meshes[0].scale)


def _gamma0_edges(mesh: TriMesh, region: int) -> np.ndarray:
    e = mesh.tagged_edges("gamma0")
    owner = np.zeros(mesh.n_nodes, np.int64) - 1
    for r in (OMEGA_PLUS, OMEGA_MINUS):
        owner[np.unique(mesh.tris[mesh.regions == r])] = r
    return e[owner[e[:, 0]] == region]


class MacroProblem:
    """Spaces and coefficient-independent matrices of the macroscale system."""

    def __init__(self, mesh: TriMesh, cfg: MacroConfig):
        self.mesh = mesh
        self.cfg = cfg
        for tag in ("in", "gamma0") + cfg.outlet_tags:
            if tag not in mesh.tags:
                raise fem.AssemblyError(f"boundary tag {tag!r} not present in mesh")
        self.Vp = fem.TriSpace(mesh, 2, regions=OMEGA_PLUS)
        self.Vm = fem.TriSpace(mesh, 2, regions=OMEGA_MINUS)
        ep = _gamma0_edges(mesh, OMEGA_PLUS)
        em = _gamma0_edges(mesh, OMEGA_MINUS)
        if len(ep) == 0 or len(em) == 0:
            raise fem.AssemblyError("interface gamma0 must be duplicated on both half-domains")
        xp = np.unique(mesh.nodes[ep].reshape(-1, 2)[:, 0])
        xm = np.unique(mesh.nodes[em].reshape(-1, 2)[:, 0])
        if len(xp) != len(xm) or np.abs(xp - xm).max() > 1e-12:
            raise fem.AssemblyError("interface node layers of the half-domains do not coincide")
        self.L2 = fem.LineSpace(xp, 2)
        self.L1 = fem.LineSpace(xp, 1)
        # traces, using per-side edge subsets
        self.Tp = fem.trace_matrix(self.Vp, "gamma0", self.L2)
        self.Tm = fem.trace_matrix(self.Vm, "gamma0", self.L2)

    @property
    def sizes(self):
        return (self.Vp.n_dofs, self.Vm.n_dofs, self.L2.n_dofs, self.L1.n_dofs, self.L1.n_dofs)

    @property
    def blocks(self):
        out, pos = {}, 0
        for name, n in zip(BLOCKS, self.sizes):
            out[name] = (pos, pos + n)
            pos += n
        return out

    @cached_property
    def line(self):
        L1, L2 = self.L1, self.L2
        return {
            "S22": fem.line_matrix(L2, L2, 1, 1),
            "M22": fem.line_matrix(L2, L2),
            "D21": fem.line_matrix(L2, L1, 1, 0),  # int q0' G
            "M21": fem.line_matrix(L2, L1),        # int q0 G
            "D12": fem.line_matrix(L1, L2, 0, 1),  # int psi p0'
            "M12": fem.line_matrix(L1, L2),        # int psi p0
            "M11": fem.line_matrix(L1, L1),
        }

    @cached_property
    def bulk(self):
        c = self.cfg
        w2 = c.omega ** 2
        out = {}
        for key, V, tags in (("plus", self.Vp, ("in",)), ("minus", self.Vm, c.outlet_tags)):
            K = fem.stiffness(V) / c.rho0 - (w2 / c.K0) * fem.mass(V)
            R = fem.boundary_mass(V, tags) * (1j * c.k0 / c.rho0)
            out[key] = (K + R).tocsr()
        out["src"] = fem.boundary_source(self.Vp, "in", 2j * c.k0 / c.rho0 * c.P_in)
        return out

    def matrix(self, co: HomogenizedCoeffs) -> sp.csr_matrix:
        c = self.cfg
        L = self.line
        e = 1.0 / c.eps0
        w2 = c.omega ** 2
        TpT = self.Tp.T @ L["M21"]
        TmT = self.Tm.T @ L["M21"]
        rows = [
            [self.bulk["plus"], None, None, -TpT, None],
            [None, self.bulk["minus"], None, None, TmT],
            [None, None, co.A11 * L["S22"] - w2 * co.Kinv * L["M22"],
             0.5 * co.B1 * L["D21"] + e * L["M21"], 0.5 * co.B1 * L["D21"] - e * L["M21"]],
            [-e * (L["M12"] @ self.Tp), e * (L["M12"] @ self.Tm), co.B1 * L["D12"],
             -0.5 * co.F * L["M11"], -0.5 * co.F * L["M11"]],
            [-0.5 * (L["M12"] @ self.Tp), -0.5 * (L["M12"] @ self.Tm), L["M12"], None, None],
        ]
        return sp.bmat(rows, format="csr", dtype=complex)

    def rhs(self) -> np.ndarray:
        b = np.zeros(sum(self.sizes), complex)
        a, z = self.blocks["P_plus"]
        b[a:z] = self.bulk["src"]
        return b

    def system(self, co: HomogenizedCoeffs) -> fem.SparseSystem:
        s = fem.SparseSystem(self.matrix(co), self.rhs(), self.blocks)
        s.context = (self, co)
        return s

    def split(self, x):
        return {name: x[a:b] for name, (a, b) in self.blocks.items()}

    def solve(self, co: HomogenizedCoeffs) -> "MacroSolution":
        return solve_macro(self.system(co))


@dataclass
class MacroSolution:
    P_plus: np.ndarray
    P_minus: np.ndarray
    p0: np.ndarray
    G0_plus: np.ndarray
    G0_minus: np.ndarray
    problem: MacroProblem
    coeffs: HomogenizedCoeffs
    residual: float = 0.0

    @property
    def cfg(self):
        return self.problem.cfg

    def vector(self):
        return np.concatenate([self.P_plus, self.P_minus, self.p0, self.G0_plus, self.G0_minus])

    def space_for(self, tag: str):
        if tag == "in":
            return self.problem.Vp, self.P_plus
        if tag in self.cfg.outlet_tags:
            return self.problem.Vm, self.P_minus
        raise fem.AssemblyError(f"{tag!r} is not an exterior inlet/outlet boundary")

    def boundary_norm(self, tag: str) -> float:
        """int_tag |P|^2 ds."""
        V, u = self.space_for(tag)
        M = fem.boundary_mass(V, tag)
        return float(np.real(np.conj(u) @ (M @ u)))

    def nodal_fields(self):
        """Vertex values of P+ and P- on the macro mesh (complex)."""
        out = np.full(self.problem.mesh.n_nodes, np.nan + 0j)
        for V, u in ((self.problem.Vp, self.P_plus), (self.problem.Vm, self.P_minus)):
            ok = V.vertex_dof >= 0
            out[ok] = u[V.vertex_dof[ok]]
        return out


def assemble_macro_system(macro_mesh: TriMesh, coeffs: HomogenizedCoeffs,
                          cfg: MacroConfig) -> fem.SparseSystem:
    return MacroProblem(macro_mesh, cfg).system(coeffs)


def solve_macro(system: fem.SparseSystem) -> MacroSolution:
    problem, co = system.context
    x = fem.solve(system, check=1e-8)
    f = problem.split(x)
    return MacroSolution(f["P_plus"], f["P_minus"], f["p0"], f["G_plus"], f["G_minus"],
                         problem, co, system.residual(x))


def boundary_energy_flux(sol: MacroSolution, tag: str) -> float:
    """Outward time-averaged power through an inlet or outlet (W/m).

    The normal derivative comes from the boundary condition on that edge."""
    cfg = sol.cfg
    V, u = sol.space_for(tag)
    M = fem.boundary_mass(V, tag)
    k = cfg.k0
    quad = float(np.real(np.conj(u) @ (M @ u)))
    if tag == "in":
        lin = fem.boundary_source(V, tag, 1.0) @ u
        val = k * quad - 2 * k * float(np.real(np.conj(cfg.P_in) * lin))
    else:
        val = k * quad
    return val / (2 * cfg.omega * cfg.rho0)


def power_balance(sol: MacroSolution) -> dict:
    cfg = sol.cfg
    inflow = -boundary_energy_flux(sol, "in")
    outflow = sum(boundary_energy_flux(sol, t) for t in cfg.outlet_tags)
    inc = cfg.incident_power()
    return {"incident": inc, "in": inflow, "out": outflow,
            "imbalance": abs(inflow - outflow) / inc}
