import numpy as np
import pytest

from metasurf.adjoint import lagrange_multipliers, solve_macro_adjoint
from metasurf.cell import COEFF_NAMES, HomogenizedCoeffs
from metasurf.macro import MacroConfig, MacroProblem, build_macro_mesh
from metasurf.objective import ObjectiveError, ObjectiveSpec, evaluate_objective


@pytest.fixture(scope="module")
def setup():
    cfg = MacroConfig(h=0.025)
    mp = MacroProblem(build_macro_mesh(cfg), cfg)
    spec = evaluate_objective(mp.solve(HomogenizedCoeffs(0.4659, 0.0, 5.05e-6, 2.18)),
                              ObjectiveSpec.case(1))[3]
    co = HomogenizedCoeffs(0.3, -1.0, 5.5e-6, 2.5)
    return mp, spec, co


def _J(mp, co, spec):
    return evaluate_objective(mp.solve(co), spec)[0]


@pytest.mark.parametrize("name", COEFF_NAMES)
def test_multiplier_matches_central_difference(setup, name):
    mp, spec, co = setup
    s = mp.solve(co)
    lam = lagrange_multipliers(s, solve_macro_adjoint(s, co, mp.cfg, spec)).as_dict()[name]
    h = 1e-6 * abs(getattr(co, name))
    fd = (_J(mp, co.perturbed(name, h), spec) - _J(mp, co.perturbed(name, -h), spec)) / (2 * h)
    assert abs(fd - lam) <= 1e-4 * abs(lam)


def test_case2_multipliers_differ(setup):
    mp, _, co = setup
    s = mp.solve(co)
    l1 = lagrange_multipliers(s, solve_macro_adjoint(s, co, mp.cfg, evaluate_objective(s, ObjectiveSpec.case(1))[3]))
    l2 = lagrange_multipliers(s, solve_macro_adjoint(s, co, mp.cfg, evaluate_objective(s, ObjectiveSpec.case(2))[3]))
    # same normalizers: swapping the roles flips the sign of J and of every multiplier
    assert np.allclose(np.array(list(l1.as_dict().values())), -np.array(list(l2.as_dict().values())),
                       rtol=1e-8)


def test_adjoint_residual_small(setup):
    mp, spec, co = setup
    s = mp.solve(co)
    adj = solve_macro_adjoint(s, co, mp.cfg, spec)
    assert adj.residual < 1e-8
    assert adj.nodal_fields(mp)["adj_Q"].shape == (mp.mesh.n_nodes,)


def test_objective_zero_at_capture(setup):
    mp, _, co = setup
    J, J1, J2, spec = evaluate_objective(mp.solve(co), ObjectiveSpec.case(2))
    assert J == pytest.approx(0.0, abs=1e-14) and J1 == pytest.approx(1.0) and J2 == pytest.approx(1.0)


def test_objective_validation(setup):
    mp, _, co = setup
    with pytest.raises(ObjectiveError):
        ObjectiveSpec(w=1.5)
    with pytest.raises(ObjectiveError):
        evaluate_objective(mp.solve(co), ObjectiveSpec(gamma_min="out"))
    with pytest.raises(ValueError):
        solve_macro_adjoint(mp.solve(co))
