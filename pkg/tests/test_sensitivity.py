import numpy as np
import pytest

from metasurf.adjoint import Multipliers
from metasurf.cell import MaterialPair, cell_coefficients, solve_cell_problems
from metasurf.mesh import ELASTIC, conform_to_levelset, graded_cell_mesh
from metasurf.sensitivity import (AIR_TO_ELASTIC, ELASTIC_TO_AIR, contrast, i_terms, map_to_jprime,
                                  sensitivity_field, topological_derivative_field)

M = MaterialPair()
UNIT = {"A11": Multipliers(1, 0, 0, 0), "B1": Multipliers(0, 1, 0, 0),
        "Kinv": Multipliers(0, 0, 1, 0), "F": Multipliers(0, 0, 0, 1)}


def test_air_cell_i_terms(cell20):
    sol = solve_cell_problems(cell20)
    c = contrast(M.rho_elastic, M.rho_air)
    assert c == pytest.approx(4 * np.pi * (M.rho_elastic - M.rho_air) / (M.rho_air * (M.rho_elastic + M.rho_air)))
    for name, expect in (("A11", -c), ("B1", 0.0), ("F", c * M.rho_air ** 2)):
        d = topological_derivative_field(sol, UNIT[name], M, AIR_TO_ELASTIC)
        assert np.allclose(-2 * np.pi * d, expect, atol=1e-8 * max(1, abs(expect)))
    d = topological_derivative_field(sol, UNIT["Kinv"], M, AIR_TO_ELASTIC)
    assert np.allclose(-2 * np.pi * d, 2 * np.pi * (1 / M.K_elastic - 1 / M.K_air))


def test_i_terms_shapes():
    g = np.zeros((4, 2))
    I = i_terms(g, g, 2.0, 1.0, 1.0, 1.0)
    assert all(len(t) == 4 for t in I)


def test_unknown_direction(cell20):
    sol = solve_cell_problems(cell20)
    with pytest.raises(ValueError):
        topological_derivative_field(sol, UNIT["A11"], M, "sideways")


@pytest.mark.parametrize("name", ["A11", "Kinv", "F"])
def test_small_inclusion_matches_coefficient_change(name):
    """Coefficient change for a disk of radius eps ~ -pi eps^2 D_T (unit multiplier)."""
    eps, probe = 0.02, (0.5, 0.5)
    gm = graded_cell_mesh(probe, eps / 8, 0.05, 3 * eps)
    base = conform_to_levelset(gm, np.full(gm.n_nodes, -1.0))
    co0, sol = cell_coefficients(base)
    i0 = int(np.argmin(np.linalg.norm(base.nodes - probe, axis=1)))
    d = topological_derivative_field(sol, UNIT[name], M, AIR_TO_ELASTIC)[i0]
    r = np.hypot(*(gm.nodes - probe).T)
    cm = conform_to_levelset(gm, np.clip((eps - r) / eps, -1, 1))
    co1, _ = cell_coefficients(cm)
    area = cm.region_area([ELASTIC])
    fd = (getattr(co1, name) - getattr(co0, name)) / (-area)
    assert fd == pytest.approx(d, rel=0.05)


def test_map_to_jprime_branches():
    ae = np.array([2.0, 2.0, -1.0, 4.0])
    ea = np.array([1.0, 3.0, 1.0, -8.0])
    phi = np.array([-0.5, 0.5, 0.0, 1.0])
    j = map_to_jprime(ae, ea, phi, normalize=False)
    assert np.array_equal(j, [-2.0, 3.0, 1.0, -8.0])
    jn = map_to_jprime(ae, ea, phi)
    assert np.max(np.abs(jn)) == pytest.approx(1.0)
    assert np.array_equal(map_to_jprime(np.zeros(3), np.zeros(3), np.ones(3)), np.zeros(3))


def test_sensitivity_field_subset(cell20):
    sol = solve_cell_problems(cell20)
    phi = -np.ones(cell20.n_nodes)
    sf = sensitivity_field(sol, Multipliers(1.0, 0.5, 1e3, 0.1), phi, np.arange(cell20.n_nodes), M)
    assert sf.jprime.shape == (cell20.n_nodes,)
    assert np.all(np.isfinite(sf.dT_elastic_to_air))
    assert ELASTIC_TO_AIR != AIR_TO_ELASTIC
