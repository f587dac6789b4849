import numpy as np
import pytest

from metasurf.levelset import (LevelSet, LevelSetParams, LevelSetUpdater, design_nodes,
                               element_labels, initialize, material_map, update)
from metasurf.mesh import ELASTIC, NDD, pair_periodic_nodes


def test_params_validated():
    with pytest.raises(ValueError):
        LevelSetParams(tau=0.0)


def test_initialize_circle(cell20):
    ls = initialize(("circle", (0.5, 0.5), 0.3), cell20, 0.1)
    assert ls.phi.min() >= -1 and ls.phi.max() <= 1
    d = design_nodes(cell20)
    nd = np.setdiff1d(np.arange(cell20.n_nodes), d)
    assert np.all(ls.phi[nd] == -1.0)
    c = np.argmin(np.linalg.norm(cell20.nodes - [0.5, 0.5], axis=1))
    assert ls.phi[c] == 1.0


def test_initialize_errors(cell20):
    with pytest.raises(ValueError):
        initialize(("circle", (0.5, 0.5), -0.1), cell20)
    with pytest.raises(ValueError):
        initialize(42, cell20)


def test_save_load_roundtrip(tmp_path, cell20):
    ls = initialize(("circle", (0.4, 0.5), 0.2), cell20)
    ls.save(tmp_path / "phi.npy")
    back = initialize(tmp_path / "phi.npy", cell20)
    assert np.array_equal(back.phi, ls.phi)
    with pytest.raises(ValueError):
        LevelSet(np.zeros(3), cell20)


def test_material_map_zero_is_elastic(cell20):
    phi = -np.ones(cell20.n_nodes)
    d = design_nodes(cell20)
    phi[d[0]] = 0.0
    chi = material_map(LevelSet(phi, cell20))
    assert chi[d[0]] == 1 and chi.sum() == 1
    labels = element_labels(LevelSet(np.where(np.isin(np.arange(cell20.n_nodes), d), 1.0, -1.0), cell20))
    assert np.all(labels[cell20.regions == NDD] == NDD)
    assert np.all(labels[cell20.regions != NDD] == ELASTIC)


def test_zero_source_keeps_bounds_and_smooths(cell20, rng):
    d = design_nodes(cell20)
    phi = -np.ones(cell20.n_nodes)
    phi[d] = rng.uniform(-1, 1, len(d))
    pm = pair_periodic_nodes(cell20)
    phi[pm.pairs[:, 1]] = phi[pm.pairs[:, 0]]
    ls = LevelSet(phi, cell20)
    upd = LevelSetUpdater(cell20, LevelSetParams(tau=1e-3))
    new = upd.step(ls, np.zeros(cell20.n_nodes))
    assert np.abs(new.phi).max() <= np.abs(phi).max() + 1e-12
    assert np.std(new.phi[d]) < np.std(phi[d])


def test_uniform_source_moves_phi(cell20):
    d = design_nodes(cell20)
    phi = -np.ones(cell20.n_nodes)
    phi[d] = 0.2
    new = update(LevelSet(phi, cell20), -np.ones(cell20.n_nodes), LevelSetParams(dt=0.1))
    # constants lie in the kernel of the Neumann diffusion
    assert np.allclose(new.phi[d], 0.3, atol=1e-12)
    sat = update(LevelSet(phi, cell20), -np.ones(cell20.n_nodes), LevelSetParams(dt=5.0))
    assert np.all(sat.phi[d] == 1.0)


def test_periodic_partners_stay_equal(cell20, rng):
    ls = initialize(("circle", (0.1, 0.5), 0.3), cell20)
    pm = pair_periodic_nodes(cell20)
    j = rng.normal(size=cell20.n_nodes)
    new = update(ls, j)
    assert np.allclose(new.phi[pm.pairs[:, 0]], new.phi[pm.pairs[:, 1]])


def test_ndd_untouched(cell20, rng):
    ls = initialize(("circle", (0.5, 0.5), 0.3), cell20)
    new = update(ls, rng.normal(size=cell20.n_nodes))
    nd = np.setdiff1d(np.arange(cell20.n_nodes), design_nodes(cell20))
    assert np.all(new.phi[nd] == -1.0)


def test_wrong_shape_source(cell20):
    ls = initialize(("circle", (0.5, 0.5), 0.3), cell20)
    with pytest.raises(ValueError):
        update(ls, np.zeros(5))
