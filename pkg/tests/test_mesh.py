import numpy as np
import pytest

from metasurf import shapes
from metasurf.mesh import (AIR, ELASTIC, NDD, MeshError, PeriodicPairingError, TriMesh,
                           check_conforming, conform_to_levelset, contour_length,
                           generate_rect_mesh, graded_cell_mesh, grid_mesh, pair_periodic_nodes,
                           read_vtk, unit_cell_mesh, write_vtk)


def test_rect_mesh_counts_and_area():
    m = generate_rect_mesh(2.0, 1.0, 4, 3)
    assert m.n_tris == 2 * 4 * 3
    assert m.n_nodes == 5 * 4
    assert np.isclose(m.areas.sum(), 2.0)
    m.validate()


def test_rect_mesh_rejects_bad_sizes():
    with pytest.raises(MeshError):
        generate_rect_mesh(0.0, 1.0, 2, 2)
    with pytest.raises(MeshError):
        generate_rect_mesh(1.0, 1.0, 0, 2)


def test_unknown_tag_rejected():
    m = generate_rect_mesh(1, 1, 2, 2)
    with pytest.raises(MeshError):
        TriMesh(m.nodes, m.tris, m.regions, m.edges, np.array(["nope"] * len(m.edges), object))


def test_unit_cell_regions_and_tags(cell20):
    m = cell20
    assert {"iy_plus", "iy_minus", "gamma1", "gamma2"} <= m.tags
    assert np.isclose(m.region_area([NDD]), 0.2)
    assert np.isclose(m.region_area([AIR]), 0.8)
    # iy_plus at the bottom
    assert np.allclose(m.nodes[m.tagged_nodes("iy_plus"), 1], 0.0)


def test_periodic_pairing(cell20):
    pm = pair_periodic_nodes(cell20)
    a, b = cell20.nodes[pm.pairs[:, 0]], cell20.nodes[pm.pairs[:, 1]]
    assert np.allclose(a[:, 1], b[:, 1])
    assert np.allclose(a[:, 0], 0.0) and np.allclose(b[:, 0], 1.0)


def test_periodic_pairing_mismatch_reported():
    xs = np.linspace(0, 1, 5)
    m = grid_mesh(xs, np.linspace(0, 1, 5), {"left": "gamma1", "right": "gamma2",
                                             "bottom": "wall", "top": "wall"})
    nodes = m.nodes.copy()
    right = m.tagged_nodes("gamma2")
    mid = right[np.argsort(nodes[right, 1])][2]
    nodes[mid, 1] += 0.01
    bad = TriMesh(nodes, m.tris, m.regions, m.edges, m.edge_tags)
    with pytest.raises(PeriodicPairingError):
        pair_periodic_nodes(bad)


def test_conform_circle_area_converges():
    errs = []
    for n in (20, 40, 80):
        m = unit_cell_mesh(n)
        cm = conform_to_levelset(m, shapes.circle(m.nodes, 0.3))
        check_conforming(cm)
        errs.append(abs(cm.region_area([ELASTIC]) - np.pi * 0.09))
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] < 1e-3


def test_conform_keeps_base_indices_and_is_idempotent(cell20):
    phi = shapes.circle(cell20.nodes, 0.3)
    cm = conform_to_levelset(cell20, phi)
    assert cm.n_nodes > cell20.n_nodes
    moved = np.linalg.norm(cm.nodes[:cm.n_nodes] [:cell20.n_nodes] - cell20.nodes, axis=1)
    assert np.all(moved < 0.06 * 1 / 20 * 2)
    again = conform_to_levelset(cm, cm.point_data["phi"])
    assert again.n_tris == cm.n_tris
    assert np.isclose(again.region_area([ELASTIC]), cm.region_area([ELASTIC]))


def test_conform_quality_and_length(cell20):
    cm = conform_to_levelset(cell20, shapes.circle(cell20.nodes, 0.3))
    assert cm.quality().min() > 0.05
    assert abs(contour_length(cm) - 2 * np.pi * 0.3) < 0.02


def test_conform_periodic_stripe():
    m = unit_cell_mesh(24)
    cm = conform_to_levelset(m, shapes.stripes(m.nodes, 1, 45.0, 0.3))
    pm = pair_periodic_nodes(cm)
    assert len(pm) > 0
    check_conforming(cm)
    phi = cm.point_data["phi"]
    assert np.allclose(phi[pm.pairs[:, 0]], phi[pm.pairs[:, 1]])


def test_conform_rejects_bad_phi(cell20):
    with pytest.raises(MeshError):
        conform_to_levelset(cell20, np.zeros(3))


def test_ndd_untouched(cell20):
    cm = conform_to_levelset(cell20, np.ones(cell20.n_nodes))
    assert np.isclose(cm.region_area([NDD]), 0.2)
    assert np.isclose(cm.region_area([ELASTIC]), 0.8)


def test_graded_cell_mesh_has_focus_node():
    m = graded_cell_mesh((0.3, 0.4), 0.002)
    assert np.min(np.linalg.norm(m.nodes - [0.3, 0.4], axis=1)) == 0.0
    m.validate()


def test_vtk_roundtrip(tmp_path, cell20):
    cm = conform_to_levelset(cell20, shapes.circle(cell20.nodes, 0.25))
    f = tmp_path / "m.vtk"
    write_vtk(f, cm, {"u": np.arange(cm.n_nodes) * 1.0 + 0.5j})
    back = read_vtk(f)
    assert np.array_equal(back.nodes, cm.nodes)
    assert np.array_equal(back.tris, cm.tris)
    assert np.array_equal(back.regions, cm.regions)
    assert list(back.edge_tags) == list(cm.edge_tags)
    assert np.array_equal(back.point_data["u_im"], np.full(cm.n_nodes, 1.0) * 0.5)
