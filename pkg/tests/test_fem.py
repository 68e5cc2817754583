import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from msfemlab.errors import (
    DegenerateElementError,
    InvalidArgumentError,
    NumericError,
    ResolutionWarning,
    SolverFailure,
)
from msfemlab.fem import (
    CENTROID,
    EDGE_MIDPOINT,
    GAUSS3,
    CoefficientField,
    FeFunction,
    SolverSettings,
    SourceField,
    assemble,
    check_resolution,
    element_load,
    element_stiffness,
    factorize,
    h1_norm_diff,
    h1_seminorm_diff,
    l2_norm_diff,
    load_vector,
    solve_sparse,
    stiffness_matrix,
)
from msfemlab.mesh import build_global_fine, build_structured_coarse

def cross2(u, v):
    return u[0] * v[1] - u[1] * v[0]


UNIT = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

coords = st.floats(-2, 2, allow_nan=False)
triangles = st.tuples(*[st.tuples(coords, coords)] * 3).map(np.array).filter(
    lambda t: abs(cross2(t[1] - t[0], t[2] - t[0])) > 1e-2
)


def ccw(t):
    if cross2(t[1] - t[0], t[2] - t[0]) < 0:
        t = t[[0, 2, 1]]
    return t


def bary_monomial_integral(area, a, b, c):
    # int_T l1^a l2^b l3^c = 2|T| a! b! c! / (a+b+c+2)!
    return 2 * area * math.factorial(a) * math.factorial(b) * math.factorial(c) / math.factorial(a + b + c + 2)


@pytest.mark.parametrize("quad", [CENTROID, EDGE_MIDPOINT, GAUSS3])
def test_quadrature_weights_sum_to_one(quad):
    assert quad.weights.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(quad.points.sum(axis=1), 1.0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(triangles)
def test_quadrature_exactness(t):
    t = ccw(t)
    area = 0.5 * abs(cross2(t[1] - t[0], t[2] - t[0]))
    for quad in (CENTROID, EDGE_MIDPOINT, GAUSS3):
        for a in range(quad.degree + 1):
            for b in range(quad.degree + 1 - a):
                for c in range(quad.degree + 1 - a - b):
                    vals = quad.points[:, 0] ** a * quad.points[:, 1] ** b * quad.points[:, 2] ** c
                    approx = area * np.dot(quad.weights, vals)
                    exact = bary_monomial_integral(area, a, b, c)
                    assert approx == pytest.approx(exact, rel=1e-13)


def test_edge_midpoint_is_not_degree_three():
    vals = EDGE_MIDPOINT.points[:, 0] ** 3
    assert abs(np.dot(EDGE_MIDPOINT.weights, vals) * 0.5 - bary_monomial_integral(0.5, 3, 0, 0)) > 1e-3


def test_element_stiffness_unit_triangle():
    K = element_stiffness(UNIT, CoefficientField.constant_scalar(1.0))
    expected = np.array([[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]])
    np.testing.assert_allclose(K, expected, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(triangles, st.floats(0.1, 50))
def test_element_stiffness_properties(t, c):
    t = ccw(t)
    Kid = element_stiffness(t, CoefficientField.constant_scalar(1.0))
    scale = np.abs(Kid).max()
    np.testing.assert_allclose(Kid.sum(axis=1), 0, atol=1e-14 * max(scale, 1))
    np.testing.assert_allclose(Kid, Kid.T, atol=1e-14 * max(scale, 1))
    Kc = element_stiffness(t, CoefficientField.constant_scalar(c))
    np.testing.assert_allclose(Kc, c * Kid, rtol=1e-12, atol=1e-14 * scale * c)


def test_element_stiffness_matrix_coefficient():
    C = np.array([[2.0, 0.5], [0.5, 3.0]])
    K = element_stiffness(UNIT, CoefficientField.constant_matrix(C))
    G = np.array([[-1, -1], [1, 0], [0, 1]], dtype=float)
    np.testing.assert_allclose(K, 0.5 * G @ C @ G.T, atol=1e-14)


def test_degenerate_element():
    with pytest.raises(DegenerateElementError):
        element_stiffness([(0, 0), (1, 1), (2, 2)], CoefficientField.constant_scalar())
    with pytest.raises(DegenerateElementError):
        element_load([(0, 0), (1, 0), (2, 0)], SourceField.constant(1))


def test_element_load_examples():
    b1 = element_load(UNIT, SourceField.constant(1.0), EDGE_MIDPOINT)
    np.testing.assert_allclose(b1, [0.5 / 3] * 3, atol=1e-14)
    np.testing.assert_array_equal(element_load(UNIT, SourceField.constant(0.0)), 0.0)
    np.testing.assert_allclose(element_load(UNIT, SourceField.constant(2.0)), 2 * b1, atol=1e-15)


def test_assemble_center_unknown():
    m = build_structured_coarse(2)
    s = assemble(m, CoefficientField.constant_scalar(), SourceField.constant(0.0))
    assert s.matrix.shape == (1, 1)
    assert s.matrix[0, 0] == pytest.approx(4.0, abs=1e-14)
    np.testing.assert_array_equal(s.rhs, 0.0)


def test_assemble_structure(periodic):
    m = build_structured_coarse(6)
    s = assemble(m, periodic, SourceField.paper_source())
    assert s.matrix.shape == (25, 25)
    assert s.asymmetry() <= 1e-12
    for i in range(s.matrix.shape[0]):
        cols = s.matrix.indices[s.matrix.indptr[i] : s.matrix.indptr[i + 1]]
        assert np.all(np.diff(cols) > 0)


def test_assemble_linear_in_coefficient():
    m = build_structured_coarse(5)
    A1 = CoefficientField.constant_matrix([[2.0, 0.3], [0.3, 1.0]])
    A2 = CoefficientField.paper_periodic(0.1, 5.0)
    T1 = np.broadcast_to(A1(np.zeros(2)), (m.n_triangles, 2, 2))
    from msfemlab.fem import triangle_tensors

    T2 = triangle_tensors(m.triangle_coords, A2)
    S = stiffness_matrix(m, T1 + T2) - stiffness_matrix(m, A1) - stiffness_matrix(m, A2)
    assert abs(S).max() <= 1e-12


def test_assemble_rejects_wrong_tensor_shape():
    m = build_structured_coarse(2)
    with pytest.raises(InvalidArgumentError):
        assemble(m, np.ones((3, 2, 2)))


def test_solve_trivial_systems():
    A = sp.csr_matrix([[4.0]])
    assert solve_sparse((A, np.array([1.0])))[0] == pytest.approx(0.25, abs=1e-15)
    np.testing.assert_array_equal(solve_sparse((A, np.zeros(1))), 0.0)
    np.testing.assert_array_equal(solve_sparse((A, np.zeros(1)), SolverSettings("cg", 1e-10)), 0.0)


def test_cg_matches_direct_on_random_spd(rng):
    B = rng.standard_normal((50, 50))
    A = sp.csr_matrix(B @ B.T + 50 * np.eye(50))
    b = rng.standard_normal(50)
    tol = 1e-10
    oracle = np.linalg.solve(A.toarray(), b)
    x = solve_sparse((A, b), SolverSettings("cg", tol))
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= tol
    assert np.abs(x - oracle).max() <= 10 * tol * max(1, np.abs(oracle).max())
    xd = solve_sparse((A, b), SolverSettings("direct"))
    assert np.linalg.norm(A @ xd - b) <= 1e-12 * np.linalg.norm(b)


def test_cg_failure_reports_residual(rng):
    B = rng.standard_normal((40, 40))
    A = sp.csr_matrix(B @ B.T + 1e-3 * np.eye(40))
    with pytest.raises(SolverFailure) as info:
        solve_sparse((A, rng.standard_normal(40)), SolverSettings("cg", 1e-14, maxit=2))
    assert info.value.residual > 1e-14


def test_direct_detects_indefinite():
    A = sp.csr_matrix(np.diag([1.0, -2.0, 3.0]))
    with pytest.raises(NumericError):
        factorize(A)


def test_auto_method_picks_direct_for_desk_sizes():
    assert SolverSettings("auto").resolve(1000) == "direct"
    assert SolverSettings("auto").resolve(2_000_000) == "cg"
    with pytest.raises(InvalidArgumentError):
        SolverSettings("lu").resolve(3)


def test_norms_of_linear_field():
    for mesh in (build_structured_coarse(3), build_global_fine(build_structured_coarse(2), 2)):
        u = FeFunction.interpolate(mesh, lambda x: x[:, 0])
        z = FeFunction.zeros(mesh)
        assert h1_seminorm_diff(u, z) == pytest.approx(1.0, abs=1e-13)
        assert l2_norm_diff(u, z) == pytest.approx(math.sqrt(1 / 3), abs=1e-13)
        assert h1_norm_diff(u, u) == 0.0


def test_seminorm_of_sine_converges():
    mesh = build_structured_coarse(64)
    u = FeFunction.interpolate(mesh, lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]))
    assert h1_seminorm_diff(u) == pytest.approx(np.pi / np.sqrt(2), rel=1e-2)


def test_norm_mesh_mismatch():
    a = FeFunction.zeros(build_structured_coarse(2))
    b = FeFunction.zeros(build_structured_coarse(3))
    with pytest.raises(InvalidArgumentError):
        h1_seminorm_diff(a, b)


def test_evaluate_and_gradient():
    m = build_structured_coarse(4)
    u = FeFunction.interpolate(m, lambda x: 2 * x[:, 0] + 3 * x[:, 1])
    np.testing.assert_allclose(u.gradients(), np.tile([2.0, 3.0], (m.n_triangles, 1)), atol=1e-12)
    np.testing.assert_allclose(u.gradient_in_element(7), [2, 3], atol=1e-12)
    assert u.evaluate(m.vertices[6]) == pytest.approx(u.values[6], abs=1e-15)
    c = m.triangle_coords[9].mean(axis=0)
    assert u.evaluate(c) == pytest.approx(u.values[m.triangles[9]].mean(), abs=1e-14)
    assert u.evaluate((0.3, 0.7)) == pytest.approx(0.6 + 2.1, abs=1e-13)


def test_galerkin_orthogonality_smoke():
    m = build_structured_coarse(16)
    f = SourceField.manufactured(1)
    s = assemble(m, CoefficientField.constant_scalar(), f)
    u = FeFunction.from_dofs(m, solve_sparse(s))
    K = stiffness_matrix(m, CoefficientField.constant_scalar())
    residual = (K @ u.values - load_vector(m, f))[m.interior_vertex_ids]
    assert np.abs(residual).max() <= 1e-10


def smallest_eigenvalue(A, iters=200):
    solve = factorize(A)
    x = np.ones(A.shape[0])
    for _ in range(iters):
        y = solve(x)
        x = y / np.linalg.norm(y)
    return float(x @ (A @ x))


def test_coercivity(periodic):
    m = build_structured_coarse(8)
    s = assemble(m, periodic)
    lam = smallest_eigenvalue(s.matrix)
    assert lam > 0
    from scipy.linalg import eigh

    assert lam == pytest.approx(eigh(s.matrix.toarray(), eigvals_only=True)[0], rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.0, 200.0))
def test_coefficient_bounds_sampled(eps, amp):
    rng = np.random.default_rng(0)
    for coeff in (
        CoefficientField.paper_periodic(eps, amp),
        CoefficientField.layered(eps, 1 + amp, 1.0),
        CoefficientField.constant_matrix([[2.0, 0.7], [-0.2, 1.5]]),
    ):
        m, M = coeff.bounds
        x = rng.random((64, 2))
        A = coeff(x)
        xi = rng.standard_normal((64, 2))
        eta = rng.standard_normal((64, 2))
        Axi = np.einsum("pij,pj->pi", A, xi)
        assert np.all(np.einsum("pi,pi->p", xi, Axi) >= m * np.sum(xi**2, axis=1) * (1 - 1e-12))
        bound = M * np.linalg.norm(xi, axis=1) * np.linalg.norm(eta, axis=1)
        assert np.all(np.abs(np.einsum("pi,pi->p", eta, Axi)) <= bound * (1 + 1e-12))


def test_paper_periodic_formula():
    c = CoefficientField.paper_periodic(0.2, 100)
    x = np.array([[0.0, 0.1], [0.05, 0.05], [0.3, 0.7]])
    expected = 1 + 100 * np.cos(np.pi * x[:, 0] / 0.2) ** 2 * np.sin(np.pi * x[:, 1] / 0.2) ** 2
    np.testing.assert_allclose(c(x)[:, 0, 0], expected, rtol=1e-15)
    np.testing.assert_array_equal(c(x)[:, 0, 1], 0.0)
    assert c.bounds == (1.0, 101.0)
    assert c(np.array([0.0, 0.1]))[0, 0] == pytest.approx(101.0)


def test_layered_profile():
    c = CoefficientField.layered(0.1, 1.0, 4.0)
    x = np.array([[0.01, 0.3], [0.07, 0.9], [0.11, 0.0], [0.16, 0.5]])
    np.testing.assert_array_equal(c(x)[:, 1, 1], [1, 4, 1, 4])
    assert c.bounds == (1.0, 4.0)


@pytest.mark.parametrize(
    "make",
    [
        lambda: CoefficientField.paper_periodic(0.0),
        lambda: CoefficientField.layered(-1, 1, 2),
        lambda: CoefficientField.layered(0.1, 0, 2),
        lambda: CoefficientField.constant_scalar(-1),
        lambda: CoefficientField.constant_matrix([[1, 0], [0, -1]]),
    ],
)
def test_invalid_coefficients(make):
    with pytest.raises(InvalidArgumentError):
        make()


def test_sources():
    x = np.array([[0.2, 0.4], [0.5, 0.5]])
    np.testing.assert_allclose(SourceField.paper_source()(x), np.sin(x[:, 0]) * np.cos(x[:, 1]))
    f = SourceField.manufactured(2)
    np.testing.assert_allclose(f(x), 8 * np.pi**2 * np.sin(2 * np.pi * x[:, 0]) * np.sin(2 * np.pi * x[:, 1]))
    assert SourceField.constant(0).is_zero


def test_resolution_guard(periodic):
    with pytest.warns(ResolutionWarning):
        assert not check_resolution(1 / 16, periodic)
    assert check_resolution(1 / 128, periodic)
    assert check_resolution(1.0, CoefficientField.constant_scalar())
