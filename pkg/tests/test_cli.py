import csv
import json

import pytest

from metasurf.cli import ConfigError, load_config, main, resolved_ini


def _ini(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_defaults_and_roundtrip(tmp_path):
    cfg = load_config(_ini(tmp_path, "[cell]\nshape = air\n"))
    assert cfg["cell"]["shape"] == "air"
    assert cfg["materials"]["rho_air_kg_m3"] == 1.2
    again = load_config(_ini(tmp_path, resolved_ini(cfg), "again.ini"))
    assert again == cfg


@pytest.mark.parametrize("text,needle", [("[cell]\nradius = 0.3\n", "radius"),
                                         ("[bogus]\nx = 1\n", "bogus"),
                                         ("[mesh]\ncell_n = many\n", "cell_n")])
def test_bad_config_rejected(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(_ini(tmp_path, text))


def test_unknown_key_exit_code(tmp_path, capsys):
    p = _ini(tmp_path, "[cell]\nradius = 0.3\n")
    assert main(["homogenize", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "radius" in capsys.readouterr().err


def test_homogenize_air(tmp_path):
    p = _ini(tmp_path, "[cell]\nshape = air\n[mesh]\ncell_n = 10\n")
    out = tmp_path / "o"
    assert main(["homogenize", str(p), "--out", str(out)]) == 0
    row = next(csv.DictReader(open(out / "coefficients.csv")))
    assert float(row["A11"]) == pytest.approx(1 / 1.2, rel=1e-10)
    assert float(row["F"]) == pytest.approx(1.2, rel=1e-10)
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == 0 and (out / "resolved.ini").exists()
    assert (out / "cell.vtk").exists()


def test_homogenize_parallelogram(tmp_path):
    p = _ini(tmp_path, "[cell]\nshape = parallelogram\n[mesh]\ncell_n = 20\n")
    out = tmp_path / "o"
    assert main(["homogenize", str(p), "--out", str(out)]) == 0
    row = next(csv.DictReader(open(out / "coefficients.csv")))
    assert float(row["B1"]) == pytest.approx(0.26, rel=0.15)


def test_macro_solve_with_coefficients(tmp_path):
    out = tmp_path / "o"
    co = tmp_path / "co.csv"
    co.write_text("A11,B1,Kinv,F\n0.56,0.26,6.2e-06,1.88\n")
    p = _ini(tmp_path, "[mesh]\nmacro_h_m = 0.025\n")
    assert main(["macro-solve", str(p), "--out", str(out), "--coefficients", str(co)]) == 0
    rows = {r["boundary"]: r for r in csv.DictReader(open(out / "flux.csv"))}
    assert set(rows) == {"in", "out1", "out2"}
    pin = -float(rows["in"]["flux_w_per_m"])
    pout = float(rows["out1"]["flux_w_per_m"]) + float(rows["out2"]["flux_w_per_m"])
    assert pin == pytest.approx(pout, rel=1e-10)
    assert (out / "field.vtk").exists()


def test_optimize_strict_exit(tmp_path):
    p = _ini(tmp_path, "[mesh]\ncell_n = 20\nmacro_h_m = 0.025\n[optimizer]\nmax_iter = 2\n")
    out = tmp_path / "o"
    assert main(["optimize", str(p), "--out", str(out), "--strict"]) == 4
    assert (out / "history.csv").exists() and (out / "phi_final.npy").exists()
    assert main(["optimize", str(p), "--out", str(tmp_path / "o2")]) == 0


def test_bad_macro_value_is_config_error(tmp_path):
    p = _ini(tmp_path, "[macro]\ngeometry = weird\n[cell]\nshape = air\n")
    assert main(["macro-solve", str(p), "--out", str(tmp_path / "o")]) == 2


def test_optimize_needs_circle_or_file(tmp_path):
    p = _ini(tmp_path, "[cell]\nshape = stripes\n")
    assert main(["optimize", str(p), "--out", str(tmp_path / "o")]) == 2


def test_td_check_writes_rows(tmp_path):
    p = _ini(tmp_path, "[mesh]\ncell_n = 20\nmacro_h_m = 0.025\n[td_check]\neps_cell = 0.02\n")
    out = tmp_path / "o"
    assert main(["td-check", str(p), "--out", str(out), "--probe", "0.9,0.5"]) == 0
    rows = list(csv.DictReader(open(out / "td_check.csv")))
    assert len(rows) == 1
    assert float(rows[0]["rel_err"]) < 0.15
