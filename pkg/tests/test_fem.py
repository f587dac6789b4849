import numpy as np
import pytest
import scipy.sparse as sp

from metasurf import fem
from metasurf.mesh import generate_rect_mesh, unit_cell_mesh


def _sq(n):
    return generate_rect_mesh(1.0, 1.0, n, n, {"bottom": "in", "top": "out", "left": "wall",
                                               "right": "wall"})


def test_quadrature_exact_degree5():
    lam, w = fem.triangle_rule(5)
    # int over reference triangle of x^a y^b = a! b! / (a+b+2)!
    from math import factorial
    x, y = lam[:, 1], lam[:, 2]
    for a in range(6):
        for b in range(6 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            assert np.isclose(0.5 * np.sum(w * x ** a * y ** b), exact, rtol=1e-13)


@pytest.mark.parametrize("order", [1, 2])
def test_mass_integrates_constants(order):
    V = fem.TriSpace(_sq(3), order)
    M = fem.mass(V)
    one = np.ones(V.n_dofs)
    assert np.isclose(one @ M @ one, 1.0)
    S = fem.stiffness(V)
    assert np.allclose(S @ one, 0.0)


def test_stiffness_symmetric_positive():
    V = fem.TriSpace(_sq(4), 2)
    S = fem.stiffness(V).toarray()
    assert np.allclose(S, S.T)
    ev = np.linalg.eigvalsh(S)
    assert ev[0] > -1e-12 and np.sum(ev < 1e-10) == 1


def test_p2_reproduces_quadratics():
    V = fem.TriSpace(_sq(3), 2)
    f = lambda x: x[:, 0] ** 2 - 2 * x[:, 0] * x[:, 1] + 3 * x[:, 1]
    u = V.interpolate(f)
    lam = np.array([[0.2, 0.3, 0.5]])
    pts = (V.mesh.nodes[V.mesh.tris] * lam[0][None, :, None]).sum(1)
    assert np.allclose(V.values_at(u, lam)[:, 0], f(pts))
    g = V.gradients_at(u, lam)[:, 0]
    assert np.allclose(g[:, 0], 2 * pts[:, 0] - 2 * pts[:, 1])


def test_poisson_manufactured_rates():
    """-lap u = f on the unit square with u = sin(pi x) sin(pi y) (zero on the boundary)."""
    errs = []
    for n in (4, 8, 16):
        m = _sq(n)
        V = fem.TriSpace(m, 2)
        K = fem.stiffness(V)
        b = fem.load(V, lambda x: 2 * np.pi ** 2 * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]))
        bd = np.unique(np.concatenate([V.edge_dofs(m.tagged_edges(t)).ravel() for t in ("in", "out", "wall")]))
        free = np.setdiff1d(np.arange(V.n_dofs), bd)
        u = np.zeros(V.n_dofs)
        u[free] = fem.Factorization(K[free][:, free]).solve(b[free])
        ex = V.interpolate(lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]))
        e = u - ex
        errs.append(np.sqrt(e @ (fem.mass(V) @ e)))
    r1, r2 = errs[0] / errs[1], errs[1] / errs[2]
    assert r1 > 6 and r2 > 6


def test_helmholtz_plane_wave_robin():
    """Duct with Robin data: exact solution is the incoming plane wave e^{-iky}."""
    k = 6.0
    m = _sq(8)
    V = fem.TriSpace(m, 2)
    A = fem.stiffness(V) - k ** 2 * fem.mass(V) + 1j * k * fem.boundary_mass(V, ("in", "out"))
    b = 2j * k * fem.boundary_source(V, "in", 1.0)
    u = fem.solve(fem.SparseSystem(A, b))
    ex = np.exp(-1j * k * V.dof_coords[:, 1])
    assert np.max(np.abs(u - ex)) < 5e-3


def test_boundary_mass_length():
    V = fem.TriSpace(_sq(5), 2)
    one = np.ones(V.n_dofs)
    assert np.isclose(one @ fem.boundary_mass(V, "in") @ one, 1.0)
    assert np.isclose(fem.boundary_source(V, "wall", 2.0).sum(), 4.0)


def test_missing_tag_named():
    V = fem.TriSpace(_sq(2), 1)
    with pytest.raises(fem.AssemblyError, match="gamma0"):
        fem.boundary_mass(V, "gamma0")


def test_periodic_space_merges_dofs():
    from metasurf.mesh import pair_periodic_nodes
    m = unit_cell_mesh(6)
    V = fem.TriSpace(m, 2, periodic=pair_periodic_nodes(m))
    W = fem.TriSpace(m, 2)
    assert W.n_dofs - V.n_dofs == 2 * (len(m.tagged_nodes("gamma1"))) - 1


def test_singular_system_reports_location():
    A = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(fem.SolverError, match="row"):
        fem.solve(fem.SparseSystem(A, np.ones(2)))


def test_line_space_matrices():
    L2 = fem.LineSpace(np.linspace(0, 2, 5), 2)
    one = np.ones(L2.n_dofs)
    assert np.isclose(one @ fem.line_matrix(L2, L2) @ one, 2.0)
    x = L2.interpolate(lambda x: x)
    assert np.isclose(x @ fem.line_matrix(L2, L2, 1, 1) @ x, 2.0)


def test_trace_matrix_selects_boundary_values():
    m = _sq(4)
    V = fem.TriSpace(m, 2)
    L = fem.LineSpace(np.linspace(0, 1, 5), 2)
    T = fem.trace_matrix(V, "in", L)
    u = V.interpolate(lambda x: x[:, 0] ** 2 + x[:, 1])
    assert np.allclose(T @ u, L.dof_x ** 2)
