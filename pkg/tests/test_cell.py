import numpy as np
import pytest

from metasurf import shapes
from metasurf.cell import (HomogenizedCoeffs, MaterialPair, a11_energy, b1_trace, cell_coefficients,
                           recovered_gradients, solve_cell_problems)
from metasurf.mesh import MeshError, conform_to_levelset, generate_rect_mesh, unit_cell_mesh

M = MaterialPair()


def _design(n, phi_fn):
    m = unit_cell_mesh(n)
    return conform_to_levelset(m, phi_fn(m.nodes))


def test_air_cell_exact(cell20):
    co, _ = cell_coefficients(cell20)
    ex = HomogenizedCoeffs.air()
    assert np.allclose(co.as_tuple(), ex.as_tuple(), rtol=1e-10, atol=1e-12)


def test_horizontal_laminate_matches_averages():
    """A band |y2 - 1/2| < 0.1 gives exact volume averages."""
    cm = _design(20, lambda y: 0.1 - np.abs(y[:, 1] - 0.5))
    co, _ = cell_coefficients(cm)
    f = 0.2
    assert np.isclose(co.A11, (1 - f) / M.rho_air + f / M.rho_elastic, rtol=1e-10)
    assert np.isclose(co.Kinv, (1 - f) / M.K_air + f / M.K_elastic, rtol=1e-10)
    assert np.isclose(co.F, (1 - f) * M.rho_air + f * M.rho_elastic, rtol=1e-9)
    assert abs(co.B1) < 1e-10


def test_symmetric_circle_has_no_coupling():
    cm = _design(30, shapes.circle)
    co, sol = cell_coefficients(cm)
    assert abs(co.B1) < 1e-3 * co.A11
    assert 0.4 < co.A11 < 0.55


def test_alternative_formulas_agree():
    cm = _design(24, shapes.parallelogram)
    co, sol = cell_coefficients(cm)
    assert np.isclose(a11_energy(sol), co.A11, rtol=1e-8)
    assert np.isclose(b1_trace(sol), co.B1, rtol=1e-6, atol=1e-10)
    assert co.B1 > 0.1


def test_mirror_flips_b1():
    co, _ = cell_coefficients(_design(24, shapes.parallelogram))
    mir = lambda y: shapes.parallelogram(np.c_[1 - y[:, 0], y[:, 1]])
    cm, _ = cell_coefficients(_design(24, mir))
    assert np.isclose(cm.B1, -co.B1, rtol=1e-2)
    assert np.isclose(cm.A11, co.A11, rtol=1e-2)


def test_refinement_converges():
    vals = [cell_coefficients(_design(n, shapes.circle))[0].A11 for n in (20, 40, 80)]
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])


def test_gauge_is_mean_zero(cell20):
    from metasurf import fem
    sol = solve_cell_problems(_design(20, shapes.circle))
    one = fem.load(sol.space, lambda x: np.ones(len(x)))
    assert abs(one @ sol.eta) < 1e-12 and abs(one @ sol.xi) < 1e-12


def test_recovered_gradients_air(cell20):
    sol = solve_cell_problems(cell20)
    ga, ge = recovered_gradients(sol, "xi")
    # xi = y2 - 1/2 up to sign in pure air
    assert np.allclose(np.abs(ga[:, 1]), M.rho_air, rtol=1e-8)
    assert np.all(np.isnan(ge))


def test_rejects_non_cell_mesh():
    with pytest.raises(MeshError):
        solve_cell_problems(generate_rect_mesh(1, 1, 4, 4))


def test_material_validation():
    with pytest.raises(ValueError):
        MaterialPair(rho_air=-1.0)
