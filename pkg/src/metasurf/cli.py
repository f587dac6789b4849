"""Command-line entry point: metasurf <command> config.ini [options]."""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, fem, shapes
from .cell import HomogenizedCoeffs, MaterialPair, cell_coefficients
from .levelset import LevelSetParams
from .macro import MacroConfig, MacroProblem, build_macro_mesh, boundary_energy_flux, power_balance
from .mesh import MeshError, conform_to_levelset, unit_cell_mesh, write_vtk
from .objective import ObjectiveError, ObjectiveSpec
from .optimizer import OptimizerConfig, Pipeline, StageError, perturbation_oracle, run
from .reference import frequency_sweep, write_sweep_csv

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_NOT_CONVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str):
    return [float(v) for v in s.replace(",", " ").split()]


def _points(s: str):
    out = []
    for chunk in s.split(";"):
        if chunk.strip():
            xy = _floats(chunk)
            if len(xy) != 2:
                raise ValueError(f"bad point {chunk!r}")
            out.append(tuple(xy))
    return out


# section -> key -> (parser, default); None default means "not set"
SCHEMA = {
    "materials": {
        "rho_air_kg_m3": (float, 1.2), "K_air_pa": (float, 1.42e5),
        "rho_elastic_kg_m3": (float, 2643.0), "K_elastic_pa": (float, 6.87e10),
    },
    "cell": {
        "shape": (str, "circle"), "center_x_cell": (float, 0.5), "center_y_cell": (float, 0.5),
        "radius_cell": (float, 0.3), "width_cell": (float, 0.24), "height_cell": (float, 0.5),
        "shear_cell": (float, 0.5), "stripes_n": (int, 1), "stripes_angle_deg": (float, 45.0),
        "stripes_fill": (float, 0.3), "profile_width_cell": (float, 0.1), "phi_file": (str, None),
        "ndd_cell": (float, 0.1),
    },
    "macro": {
        "geometry": (str, "design"), "width_m": (float, 0.5), "depth_m": (float, 0.5),
        "outlet_width_m": (float, 0.2), "wall_width_m": (float, 0.1), "eps0_m": (float, 0.01),
        "kappa": (float, 1.0), "rho0_kg_m3": (float, 1.2), "K0_pa": (float, 1.42e5),
        "P_in_pa": (float, 1.0), "inlet_start_m": (float, None), "inlet_end_m": (float, None),
        "outlet_start_m": (float, None), "outlet_end_m": (float, None),
        "collapse_gap": (_bool, False),
    },
    "frequency": {"k0_per_m": (float, None), "freq_hz": (float, None)},
    "mesh": {"cell_n": (int, 40), "macro_h_m": (float, 0.0125), "ref_cell_n": (int, 16)},
    "sweep": {
        "k0_min_per_m": (float, 5.0), "k0_max_per_m": (float, 60.0), "k0_step_per_m": (float, 1.0),
        "jobs": (int, 1), "meas": (str, None),
    },
    "objective": {"w": (float, 0.5), "case": (int, 1)},
    "levelset": {"K_phi": (float, 1.0), "tau": (float, 5e-4), "dt": (float, 0.5)},
    "optimizer": {
        "max_iter": (int, 400), "conv_threshold": (float, 3e-4), "conv_after_iter": (int, 200),
        "snapshot_every": (int, 50),
    },
    "td_check": {"probes_cell": (_points, "0.9,0.5; 0.5,0.15; 0.15,0.25"),
                 "eps_cell": (_floats, "0.01 0.005")},
    "output": {"dir": (str, "metasurf_out")},
    "debug": {"verbose": (_bool, False)},
}


def load_config(path) -> dict:
    """Strict parse: unknown sections or keys are errors; defaults fill the rest."""
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    raw = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            raw[(sec, key)] = val
    out = {}
    for sec, keys in SCHEMA.items():
        out[sec] = {}
        for key, (conv, default) in keys.items():
            if (sec, key) in raw:
                try:
                    out[sec][key] = conv(raw[(sec, key)])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {sec}.{key}: {exc}") from None
            else:
                out[sec][key] = conv(default) if isinstance(default, str) and conv in (_points, _floats) \
                    else default
    f = out["frequency"]
    if f["k0_per_m"] is not None and f["freq_hz"] is not None:
        raise ConfigError("set only one of frequency.k0_per_m and frequency.freq_hz")
    return out


def resolved_ini(cfg: dict) -> str:
    lines = []
    for sec, keys in cfg.items():
        lines.append(f"[{sec}]")
        for k, v in keys.items():
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, list) and v and isinstance(v[0], tuple):
                v = "; ".join(f"{a!r},{b!r}" for a, b in v)
            elif isinstance(v, list):
                v = " ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- builders

def materials_from(cfg) -> MaterialPair:
    m = cfg["materials"]
    return MaterialPair(m["rho_air_kg_m3"], m["K_air_pa"], m["rho_elastic_kg_m3"], m["K_elastic_pa"])


def macro_from(cfg) -> MacroConfig:
    m, f = cfg["macro"], cfg["frequency"]
    inlet = outlet = None
    if m["inlet_start_m"] is not None or m["inlet_end_m"] is not None:
        inlet = (m["inlet_start_m"] or 0.0, m["inlet_end_m"] if m["inlet_end_m"] is not None else m["width_m"])
    if m["outlet_start_m"] is not None or m["outlet_end_m"] is not None:
        outlet = (m["outlet_start_m"] or 0.0,
                  m["outlet_end_m"] if m["outlet_end_m"] is not None else m["width_m"])
    kw = dict(P_in=m["P_in_pa"], eps0=m["eps0_m"], kappa=m["kappa"], rho0=m["rho0_kg_m3"],
              K0=m["K0_pa"], geometry=m["geometry"], width=m["width_m"], depth=m["depth_m"],
              outlet_width=m["outlet_width_m"], wall_width=m["wall_width_m"],
              h=cfg["mesh"]["macro_h_m"], collapse_gap=m["collapse_gap"], inlet=inlet, outlet=outlet)
    try:
        if f["freq_hz"] is not None:
            return MacroConfig.from_omega(2 * np.pi * f["freq_hz"], **kw)
        return MacroConfig(k0=f["k0_per_m"] if f["k0_per_m"] is not None else 25.0, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def phi_function(cfg):
    c = cfg["cell"]
    shape = c["shape"]
    w = c["profile_width_cell"]
    ctr = (c["center_x_cell"], c["center_y_cell"])
    if shape == "air":
        return lambda y: -np.ones(len(y))
    if shape == "circle":
        if not c["radius_cell"] > 0:
            raise ConfigError("cell.radius_cell must be positive")
        return lambda y: np.clip(shapes.circle(y, c["radius_cell"], ctr) / w, -1, 1)
    if shape == "parallelogram":
        return lambda y: np.clip(shapes.parallelogram(y, c["width_cell"], c["height_cell"],
                                                      c["shear_cell"], ctr) / w, -1, 1)
    if shape == "stripes":
        return lambda y: np.clip(shapes.stripes(y, c["stripes_n"], c["stripes_angle_deg"],
                                                c["stripes_fill"]) / w, -1, 1)
    raise ConfigError(f"unknown cell.shape {shape!r}")


def cell_mesh_from(cfg, n=None):
    base = unit_cell_mesh(n or cfg["mesh"]["cell_n"], cfg["cell"]["ndd_cell"])
    if cfg["cell"]["shape"] == "file":
        if not cfg["cell"]["phi_file"]:
            raise ConfigError("cell.shape = file needs cell.phi_file")
        phi = np.load(cfg["cell"]["phi_file"], allow_pickle=False)
    else:
        phi = phi_function(cfg)(base.nodes)
    return conform_to_levelset(base, phi)


def objective_from(cfg) -> ObjectiveSpec:
    o = cfg["objective"]
    try:
        return ObjectiveSpec.case(o["case"], o["w"])
    except ObjectiveError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- commands

def _write_coeffs(path, co: HomogenizedCoeffs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["A11", "B1", "Kinv", "F"])
        w.writerow([repr(float(v)) for v in co.as_tuple()])


def _read_coeffs(path) -> HomogenizedCoeffs:
    with open(path) as fh:
        row = next(csv.DictReader(fh))
    return HomogenizedCoeffs(*(float(row[k]) for k in ("A11", "B1", "Kinv", "F")))


def cmd_homogenize(cfg, out: Path, args):
    cm = cell_mesh_from(cfg)
    co, sol = cell_coefficients(cm, materials_from(cfg))
    _write_coeffs(out / "coefficients.csv", co)
    write_vtk(out / "cell.vtk", cm, sol.export_fields())
    print("A11={:.6g} B1={:.6g} Kinv={:.6g} F={:.6g}".format(*co.as_tuple()))
    return EXIT_OK


def cmd_macro_solve(cfg, out: Path, args):
    mc = macro_from(cfg)
    if args.coefficients:
        co = _read_coeffs(args.coefficients)
    else:
        co, _ = cell_coefficients(cell_mesh_from(cfg), materials_from(cfg))
    mesh = build_macro_mesh(mc)
    sol = MacroProblem(mesh, mc).solve(co)
    write_vtk(out / "field.vtk", mesh, {"P": sol.nodal_fields()})
    with open(out / "flux.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["boundary", "int_abs_p2_pa2_m", "flux_w_per_m"])
        for tag in ("in",) + mc.outlet_tags:
            w.writerow([tag, repr(sol.boundary_norm(tag)), repr(boundary_energy_flux(sol, tag))])
    bal = power_balance(sol)
    print("power in={in:.6e} out={out:.6e} imbalance={imbalance:.2e}".format(**bal))
    return EXIT_OK


def cmd_sweep(cfg, out: Path, args):
    mc = macro_from(cfg)
    s = cfg["sweep"]
    ks = np.arange(s["k0_min_per_m"], s["k0_max_per_m"] + 0.5 * s["k0_step_per_m"], s["k0_step_per_m"])
    cm = cell_mesh_from(cfg, cfg["mesh"]["ref_cell_n"])
    co, _ = cell_coefficients(cm, materials_from(cfg))
    meas = s["meas"].split() if s["meas"] else None
    rows = frequency_sweep(cm, co, mc, ks, materials_from(cfg), meas=meas, n_jobs=s["jobs"])
    write_sweep_csv(out / "sweep.csv", rows)
    print(f"{len(rows)} frequencies written to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_optimize(cfg, out: Path, args):
    mc = macro_from(cfg)
    c, ls_, op = cfg["cell"], cfg["levelset"], cfg["optimizer"]
    if c["shape"] not in ("circle", "file"):
        raise ConfigError("optimize starts from cell.shape = circle or file")
    try:
        params = LevelSetParams(ls_["K_phi"], ls_["tau"], ls_["dt"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    oc = OptimizerConfig(macro=mc, materials=materials_from(cfg), objective=objective_from(cfg),
                         levelset=params, cell_n=cfg["mesh"]["cell_n"], ndd=c["ndd_cell"],
                         init_center=(c["center_x_cell"], c["center_y_cell"]),
                         init_radius=c["radius_cell"], init_width=c["profile_width_cell"],
                         init_file=c["phi_file"] if c["shape"] == "file" else None,
                         max_iter=op["max_iter"], conv_threshold=op["conv_threshold"],
                         conv_after=op["conv_after_iter"], snapshot_every=op["snapshot_every"])
    log = print if cfg["debug"]["verbose"] else None
    _, st, _ = run(oc, out, log)
    last = st.history[-1]
    print(f"iterations={len(st.history)} J={last[1]:.6f} B1={last[5]:.6f} converged={st.converged}")
    if args.strict and not st.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_td_check(cfg, out: Path, args):
    mc = macro_from(cfg)
    pipe = Pipeline(mc, materials_from(cfg))
    base = unit_cell_mesh(cfg["mesh"]["cell_n"], cfg["cell"]["ndd_cell"])
    phi_fn = phi_function(cfg)
    spec = pipe.evaluate(conform_to_levelset(base, phi_fn(base.nodes)), objective_from(cfg)).spec
    probes = [tuple(map(float, p.split(","))) for p in args.probe] if args.probe else cfg["td_check"]["probes_cell"]
    rows = []
    for p in probes:
        for eps in cfg["td_check"]["eps_cell"]:
            r = perturbation_oracle(pipe, spec, phi_fn, p, eps)
            rel = abs(r["fd"] - r["DT"]) / abs(r["DT"])
            rel_a = abs(r["fd_area"] - r["DT"]) / abs(r["DT"])
            rows.append([p[0], p[1], eps, r["direction"], r["DT"], r["fd"], r["fd_area"], rel, rel_a])
            print(f"probe=({p[0]:.3f},{p[1]:.3f}) eps={eps:g} {r['direction']} DT={r['DT']:.6g} "
                  f"estimate={r['fd']:.6g} rel_err={rel:.3e}")
    with open(out / "td_check.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_x_cell", "probe_y_cell", "eps_cell", "direction", "DT", "estimate",
                    "estimate_area", "rel_err", "rel_err_area"])
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return EXIT_OK


COMMANDS = {"homogenize": cmd_homogenize, "macro-solve": cmd_macro_solve, "sweep": cmd_sweep,
            "optimize": cmd_optimize, "td-check": cmd_td_check}


def build_parser():
    p = argparse.ArgumentParser(prog="metasurf", description=__doc__)
    p.add_argument("--version", action="version", version=f"metasurf {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="INI configuration file")
        s.add_argument("--out", help="output directory (overrides output.dir)")
        if name == "macro-solve":
            s.add_argument("--coefficients", help="coefficients CSV from homogenize")
        if name == "optimize":
            s.add_argument("--strict", action="store_true", help="exit 4 when not converged")
        if name == "td-check":
            s.add_argument("--probe", action="append", help="probe point x,y in cell units")
    return p


def _manifest(out: Path, cfg, argv, start, end, status):
    (out / "resolved.ini").write_text(resolved_ini(cfg))
    info = {"command": argv[0] if argv else None, "argv": list(argv), "status": status,
            "versions": {"metasurf": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "started": start, "finished": end, "config": "resolved.ini"}
    (out / "manifest.json").write_text(json.dumps(info, indent=2) + "\n")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg["output"]["dir"] = args.out
        out = Path(cfg["output"]["dir"])
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.strftime("%Y-%m-%dT%H:%M:%S")
    try:
        code = COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (fem.SolverError, fem.AssemblyError, MeshError, StageError, ObjectiveError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        code = EXIT_SOLVER
    _manifest(out, cfg, argv, start, time.strftime("%Y-%m-%dT%H:%M:%S"), code)
    return code


if __name__ == "__main__":
    sys.exit(main())
