"""Level-set topology optimization loop of the unit cell."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import Multipliers, lagrange_multipliers, solve_macro_adjoint
from .cell import CellSolution, HomogenizedCoeffs, MaterialPair, cell_coefficients
from .levelset import LevelSet, LevelSetParams, LevelSetUpdater, initialize
from .macro import MacroConfig, MacroProblem, MacroSolution, build_macro_mesh
from .mesh import (ELASTIC, TriMesh, conform_to_levelset, graded_cell_mesh,
                   unit_cell_mesh, write_vtk)
from .objective import ObjectiveSpec, evaluate_objective
from .sensitivity import (AIR_TO_ELASTIC, ELASTIC_TO_AIR, SensitivityField, sensitivity_field,
                          topological_derivative_field)

__all__ = ["ObjectiveSpec", "evaluate_objective", "OptimizerConfig", "OptimizerState", "StageError",
           "run", "Pipeline", "moving_average", "perturbation_oracle", "HISTORY_COLUMNS"]

HISTORY_COLUMNS = ("iter", "J", "J1", "J2", "A11", "B1", "Kinv", "F", "moving_avg")


class StageError(RuntimeError):
    def __init__(self, iteration: int, stage: str, cause: Exception):
        super().__init__(f"iteration {iteration}, stage {stage}: {cause}")
        self.iteration = iteration
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class OptimizerConfig:
    macro: MacroConfig = MacroConfig()
    materials: MaterialPair = MaterialPair()
    objective: ObjectiveSpec = ObjectiveSpec.case(1)
    levelset: LevelSetParams = LevelSetParams()
    cell_n: int = 40
    ndd: float = 0.1
    init_center: tuple = (0.5, 0.5)
    init_radius: float = 0.3
    init_width: float = 0.1
    init_file: str | None = None
    max_iter: int = 400
    conv_threshold: float = 3e-4
    conv_after: int = 200
    snapshot_every: int = 50


@dataclass
class OptimizerState:
    iteration: int = 0
    history: list = field(default_factory=list)
    phi: LevelSet | None = None
    rel_changes: list = field(default_factory=list)
    converged: bool = False
    spec: ObjectiveSpec | None = None

    @property
    def moving_avg(self) -> float:
        return moving_average(self.rel_changes)


def moving_average(rel_changes, window: int = 10) -> float:
    """Mean of the last ``window`` relative changes; NaN until that many exist
    (i.e. until window + 1 objective samples)."""
    if len(rel_changes) < window:
        return float("nan")
    return float(np.mean(rel_changes[-window:]))


def _rel_change(Jn: float, Jp: float) -> float:
    if Jn == 0.0:
        return 0.0 if Jp == 0.0 else float("inf")
    return abs(Jn - Jp) / abs(Jn)


@dataclass
class Evaluation:
    cell_mesh: TriMesh
    cell: CellSolution
    coeffs: HomogenizedCoeffs
    state: MacroSolution
    J: float
    J1: float
    J2: float
    spec: ObjectiveSpec


class Pipeline:
    """Cell solve -> coefficients -> macro solve -> objective -> adjoint ->
    multipliers -> topological derivative, on a fixed macro problem."""

    def __init__(self, macro_cfg: MacroConfig, materials: MaterialPair = MaterialPair(),
                 macro_mesh: TriMesh | None = None):
        self.cfg = macro_cfg
        self.materials = materials
        self.problem = MacroProblem(build_macro_mesh(macro_cfg) if macro_mesh is None else macro_mesh,
                                    macro_cfg)

    def evaluate(self, cell_mesh: TriMesh, spec: ObjectiveSpec) -> Evaluation:
        co, sol = cell_coefficients(cell_mesh, self.materials)
        st = self.problem.solve(co)
        J, J1, J2, spec = evaluate_objective(st, spec)
        return Evaluation(cell_mesh, sol, co, st, J, J1, J2, spec)

    def multipliers(self, ev: Evaluation) -> Multipliers:
        adj = solve_macro_adjoint(ev.state, ev.coeffs, self.cfg, ev.spec)
        return lagrange_multipliers(ev.state, adj)

    def sensitivity(self, ev: Evaluation, mult: Multipliers, phi_base, n_base: int) -> SensitivityField:
        return sensitivity_field(ev.cell, mult, phi_base, np.arange(n_base), self.materials)


def _stage(it, name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except Exception as exc:  # any stage failure is reported with its location
        raise StageError(it, name, exc) from exc


def _fmt(v) -> str:
    return repr(float(v))


def run(config: OptimizerConfig = OptimizerConfig(), out_dir=None, log=None):
    """Returns (final LevelSet, OptimizerState, artifact paths)."""
    cfg = config
    out = Path(out_dir) if out_dir is not None else None
    artifacts = {}
    base = unit_cell_mesh(cfg.cell_n, cfg.ndd)
    if cfg.init_file:
        ls = initialize(cfg.init_file, base)
    else:
        ls = initialize(("circle", cfg.init_center, cfg.init_radius), base, cfg.init_width)
    pipe = Pipeline(cfg.macro, cfg.materials)
    upd = LevelSetUpdater(base, cfg.levelset)
    st = OptimizerState(phi=ls, spec=cfg.objective)
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "snapshots").mkdir(exist_ok=True)
        artifacts["history"] = out / "history.csv"
        fh = open(artifacts["history"], "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
    try:
        for it in range(cfg.max_iter):
            st.iteration = it
            cm = _stage(it, "remesh", conform_to_levelset, base, ls.phi)
            ev = _stage(it, "cell+macro+objective", pipe.evaluate, cm, st.spec)
            st.spec = ev.spec
            if st.history:
                st.rel_changes.append(_rel_change(ev.J, st.history[-1][1]))
            ma = st.moving_avg
            row = (it, ev.J, ev.J1, ev.J2, *ev.coeffs.as_tuple(), ma)
            st.history.append(row)
            if writer is not None:
                writer.writerow([it] + [_fmt(v) for v in row[1:]])
                fh.flush()
            if log is not None:
                log(f"iter {it:4d}  J={ev.J:+.6f}  J1={ev.J1:.4f}  J2={ev.J2:.4f}  B1={ev.coeffs.B1:+.4f}")
            if out is not None and cfg.snapshot_every and it % cfg.snapshot_every == 0:
                _snapshot(out / "snapshots", it, ls, cm)
            if it >= cfg.conv_after and np.isfinite(ma) and ma < cfg.conv_threshold:
                st.converged = True
                break
            if it == cfg.max_iter - 1:
                break
            mult = _stage(it, "adjoint", pipe.multipliers, ev)
            sens = _stage(it, "sensitivity", pipe.sensitivity, ev, mult, ls.phi, base.n_nodes)
            ls = _stage(it, "levelset", upd.step, ls, sens.jprime)
            st.phi = ls
    finally:
        if fh is not None:
            fh.close()
    st.phi = ls
    if out is not None:
        ls.save(out / "phi_final.npy")
        artifacts["phi"] = out / "phi_final.npy"
        cm = conform_to_levelset(base, ls.phi)
        write_vtk(out / "design_final.vtk", cm)
        artifacts["design"] = out / "design_final.vtk"
    return ls, st, artifacts


def _snapshot(folder: Path, it: int, ls: LevelSet, cm: TriMesh):
    write_vtk(folder / f"phi_{it:05d}.vtk", ls.mesh, {"phi": ls.phi})
    write_vtk(folder / f"design_{it:05d}.vtk", cm)


# ---------------------------------------------------------------- verification

def perturbation_oracle(pipe: Pipeline, spec: ObjectiveSpec, phi_fn, probe, eps: float,
                        h_ratio: float = 16.0, h_coarse: float = 0.04):
    """Compare D_T J at ``probe`` with the re-solve estimate for a small disk.

    ``phi_fn`` maps cell points to the design level set. Returns a dict with
    the derivative, the estimate normalized by -pi eps^2, and the estimate
    normalized by the meshed inclusion area."""
    gm = graded_cell_mesh(probe, eps / h_ratio, h_coarse, 3 * eps)
    phid = np.asarray(phi_fn(gm.nodes), float)
    cm = conform_to_levelset(gm, phid)
    ev = pipe.evaluate(cm, spec)
    mult = pipe.multipliers(ev)
    i0 = int(np.argmin(np.linalg.norm(cm.nodes - np.asarray(probe), axis=1)))
    air = phid[i0] <= 0
    direction = AIR_TO_ELASTIC if air else ELASTIC_TO_AIR
    d = float(topological_derivative_field(ev.cell, mult, pipe.materials, direction)[i0])
    r = np.hypot(*(gm.nodes - np.asarray(probe)).T)
    disk = np.clip((eps - r) / eps, -1.0, 1.0)
    php = np.maximum(phid, disk) if air else np.minimum(phid, -disk)
    cmp = conform_to_levelset(gm, php)
    Jp = pipe.evaluate(cmp, ev.spec).J
    area = abs(cmp.region_area([ELASTIC]) - cm.region_area([ELASTIC]))
    return {"probe": tuple(probe), "eps": eps, "direction": direction, "DT": d,
            "fd": (Jp - ev.J) / (-np.pi * eps ** 2), "fd_area": (Jp - ev.J) / (-area),
            "J": ev.J, "J_pert": Jp}
