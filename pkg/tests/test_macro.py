import numpy as np
import pytest

from metasurf.cell import HomogenizedCoeffs
from metasurf.macro import (BLOCKS, MacroConfig, MacroProblem, build_macro_mesh, power_balance)


def _solve(cfg, co=HomogenizedCoeffs.air()):
    return MacroProblem(build_macro_mesh(cfg), cfg).solve(co)


def test_air_layer_is_transparent():
    cfg = MacroConfig(geometry="validation", h=0.025)
    sol = _solve(cfg)
    assert np.allclose(np.abs(sol.P_minus), 1.0, atol=3e-3)
    assert np.allclose(np.abs(sol.P_plus), 1.0, atol=3e-3)
    # a single right-going plane wave e^{-i k0 x2} (time convention e^{i omega t})
    for V, u in ((sol.problem.Vp, sol.P_plus), (sol.problem.Vm, sol.P_minus)):
        c = u * np.exp(1j * cfg.k0 * V.dof_coords[:, 1])
        assert np.max(np.abs(c - c.mean())) < 5e-3


def test_power_balance_lossless():
    cfg = MacroConfig(h=0.025)
    co = HomogenizedCoeffs(0.56, 0.26, 6.2e-6, 1.88)
    pb = power_balance(_solve(cfg, co))
    assert pb["imbalance"] < 1e-10
    assert 0 < pb["out"] <= pb["incident"] * (1 + 1e-10)


def test_block_layout():
    cfg = MacroConfig(h=0.025)
    pr = MacroProblem(build_macro_mesh(cfg), cfg)
    blocks = pr.blocks
    assert tuple(blocks) == BLOCKS
    ends = [b for _, b in blocks.values()]
    assert ends[-1] == pr.matrix(HomogenizedCoeffs.air()).shape[0]


def test_mesh_tags_design_template():
    cfg = MacroConfig(h=0.025)
    m = build_macro_mesh(cfg)
    assert {"in", "out1", "out2", "wall", "gamma0"} <= m.tags
    for t, (a, b) in (("out1", (0.0, 0.2)), ("out2", (0.3, 0.5))):
        x = m.nodes[m.tagged_nodes(t), 0]
        assert np.isclose(x.min(), a) and np.isclose(x.max(), b)
    x = m.nodes[m.tagged_nodes("in"), 0]
    assert np.isclose(x.min(), 0.0) and np.isclose(x.max(), 0.2)


def test_coupling_shifts_flux_between_outlets():
    cfg = MacroConfig(h=0.025)
    plus = _solve(cfg, HomogenizedCoeffs(0.56, 0.26, 6.2e-6, 1.88))
    minus = _solve(cfg, HomogenizedCoeffs(0.56, -0.26, 6.2e-6, 1.88))
    r = lambda s: s.boundary_norm("out1") / s.boundary_norm("out2")
    assert r(plus) != pytest.approx(r(minus), rel=1e-3)


@pytest.mark.parametrize("kw", [dict(eps0=0.0), dict(k0=-1.0), dict(geometry="other"),
                                dict(inlet=(0.3, 0.2)), dict(outlet=(0.0, 0.1)),
                                dict(outlet_width=0.3)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MacroConfig(**kw)


def test_from_omega_roundtrip():
    cfg = MacroConfig.from_omega(MacroConfig(k0=30.0).omega)
    assert np.isclose(cfg.k0, 30.0)
    assert cfg.n_cells == 50


def test_linearity_in_source():
    cfg = MacroConfig(h=0.025)
    mp = MacroProblem(build_macro_mesh(cfg), cfg)
    co = HomogenizedCoeffs(0.56, 0.26, 6.2e-6, 1.88)
    one = mp.solve(co).vector()
    mp2 = MacroProblem(mp.mesh, cfg.with_(P_in=2.0))
    assert np.allclose(mp2.solve(co).vector(), 2 * one, rtol=1e-12, atol=1e-14)
    mp0 = MacroProblem(mp.mesh, cfg.with_(P_in=0.0))
    assert not np.any(mp0.solve(co).vector())


def test_plane_wave_flux_value():
    cfg = MacroConfig(geometry="validation", h=0.025)
    pb = power_balance(_solve(cfg))
    assert pb["incident"] == pytest.approx(6.06e-4, rel=1e-3)
    assert pb["in"] == pytest.approx(pb["incident"], rel=1e-4)
