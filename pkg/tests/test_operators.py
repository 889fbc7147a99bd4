import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lichlab.errors import IncompatibleData, SingularOperator, StencilOutOfDomain
from lichlab.grid import OneFormField, ScalarField, make_ball_grid, sample_field
from lichlab.killing import killing_project, make_killing_basis
from lichlab.operators import (Dirichlet, LinearSolverConfig, Robin, adjointness_residual, apply_operator,
                               conformal_factor_values, scalar_bvp_solve, symbol_quadratic_form, vector_bvp_solve)
from lichlab.verify import compact_bump_pair, gaussian_test_form, observed_orders

vec3 = st.lists(st.floats(-5, 5), min_size=3, max_size=3)


@pytest.fixture(scope="module")
def grid():
    return make_ball_grid(1.0, 0.2)


def test_laplacian_of_r2_is_minus_six(grid):
    f = sample_field(grid, lambda x: np.sum(x * x, axis=1))
    out = apply_operator("laplacian", f, grid.interior_nodes)
    assert np.allclose(out, -6.0, atol=1e-11)


def test_cko_kills_constants_and_dilations(grid):
    for fn in (lambda x: np.tile([1.0, -2.0, 0.5], (len(x), 1)), lambda x: x):
        L = apply_operator("cko", sample_field(grid, fn))
        assert np.abs(L.values[grid.interior_mask]).max() < 1e-12


def test_cko_output_is_traceless(grid):
    W = sample_field(grid, lambda x: np.sin(x) * x[:, [1, 2, 0]])
    assert np.abs(apply_operator("cko", W).trace()).max() < 1e-12


def test_stencil_out_of_domain(grid):
    f = sample_field(grid, lambda x: x[:, 0])
    with pytest.raises(StencilOutOfDomain):
        apply_operator("laplacian", f, grid.boundary_nodes[:1])


def test_operator_type_check(grid):
    with pytest.raises(TypeError):
        apply_operator("cko", ScalarField(grid, np.zeros(grid.n)))


def test_adjointness_zero_and_bumps():
    g = make_ball_grid(1.0, 0.1)
    a, b = (OneFormField(g, v) for v in compact_bump_pair(g, np.random.default_rng(3)))
    assert adjointness_residual(a, OneFormField(g, np.zeros((g.n, 3)))) == 0.0
    assert adjointness_residual(a, b) <= 10 * g.h
    assert adjointness_residual(a, a) <= 10 * g.h


def test_vec_laplacian_symmetric_on_compact_pairs():
    g = make_ball_grid(1.0, 0.1)
    a, b = (OneFormField(g, v) for v in compact_bump_pair(g, np.random.default_rng(4)))
    from lichlab.grid import inner
    lhs = inner(apply_operator("vec-laplacian", a), b)
    rhs = inner(a, apply_operator("vec-laplacian", b))
    scale = np.abs(a.values).max() * np.abs(b.values).max()
    assert abs(lhs - rhs) <= 10 * g.h * scale


@settings(max_examples=50, deadline=None)
@given(vec3, vec3)
def test_strong_ellipticity(xi, eta):
    xi, eta = np.array(xi), np.array(eta)
    assert symbol_quadratic_form(xi, eta) >= (xi @ xi) * (eta @ eta) * (1 - 1e-12) - 1e-9


def test_dirichlet_quadratic_exact(grid):
    r2 = np.sum(grid.points**2, axis=1)
    v = scalar_bvp_solve(np.zeros(grid.n), ScalarField(grid, np.full(grid.n, -6.0)), Dirichlet(r2))
    assert np.abs(v.values - r2).max() < 1e-10


def test_manufactured_dirichlet_order():
    hs, errs = (0.2, 0.1, 0.05), []
    for h in hs:
        g = make_ball_grid(1.0, h)
        r2 = np.sum(g.points**2, axis=1)
        u = np.exp(-r2)
        rhs = -(4 * r2 - 6) * u + u  # Delta u + u with Delta = -div grad
        v = scalar_bvp_solve(np.ones(g.n), ScalarField(g, rhs), Dirichlet(u))
        errs.append(np.abs(v.values - u).max())
    orders = observed_orders(errs, hs)
    assert all(1.9 <= p <= 2.1 for p in orders), orders


def test_conformal_robin_reproduces_conformal_factor():
    g = make_ball_grid(1.0, 0.1)
    U = conformal_factor_values(g.points)
    v = scalar_bvp_solve(np.zeros(g.n), ScalarField(g, 0.75 * U**5), Robin("conformal"), form="conformal")
    assert np.abs(v.values - U).max() < 1e-9


def test_robin_kind_validated():
    with pytest.raises(ValueError):
        Robin("neumann")


def test_singular_scalar_operator(grid):
    # the constant is a Neumann-type null vector when c = 0 and the boundary is decay-free
    A_shift = np.full(grid.n, -1e6)
    with pytest.raises(SingularOperator):
        from lichlab.operators import _Factored, scalar_system
        _Factored(scalar_system(grid, A_shift, Dirichlet(np.zeros(grid.n))) * 0.0, LinearSolverConfig())


def test_linear_solver_config_validation():
    with pytest.raises(ValueError):
        LinearSolverConfig(tol_rel=0.5)
    with pytest.raises(ValueError):
        LinearSolverConfig(max_iter=0)
    with pytest.raises(ValueError):
        LinearSolverConfig(method="magic")


def test_vector_zero_data_gives_zero(grid):
    B = make_killing_basis(grid)
    Z = vector_bvp_solve(OneFormField(grid, np.zeros((grid.n, 3))), None, B)
    assert not np.any(Z.values)


def test_vector_killing_rhs_is_incompatible(grid):
    B = make_killing_basis(grid)
    with pytest.raises(IncompatibleData):
        vector_bvp_solve(B.fields[3], None, B)


def polynomial_bump_form(points, c, rho, a):
    """X = (1 - |y - c|^2 / rho^2)_+^6 a and its exact vector Laplacian."""
    d = points - c
    q = np.sum(d * d, axis=1) / rho**2
    t = np.clip(1 - q, 0, None)
    s, s1, s2 = t**6, -6 * t**5, 30 * t**4
    lap = -(4 * s2 * q / rho**2 + 6 * s1 / rho**2)  # geometer's sign
    hess = 4 * s2[:, None, None] * d[:, :, None] * d[:, None, :] / rho**4 + 2 * s1[:, None, None] * np.eye(3) / rho**2
    return s[:, None] * a, lap[:, None] * a - np.einsum("nij,j->ni", hess, a) / 3.0


@pytest.mark.slow
def test_vector_manufactured_order():
    hs, errs = (np.sqrt(2) / 10, 0.1, np.sqrt(2) / 20), []
    a, c = np.array([1.0, -0.5, 0.25]), np.array([0.1, 0.0, -0.05])
    for h in hs:
        g = make_ball_grid(1.0, h)
        B = make_killing_basis(g)
        X, L = polynomial_bump_form(g.points, c, 0.8, a)
        Zs = X - killing_project(B, OneFormField(g, X)).values
        Z = vector_bvp_solve(OneFormField(g, L), None, B)
        errs.append(np.abs(Z.values - Zs).max() / np.abs(Zs).max())
    orders = observed_orders(errs, hs)
    assert all(1.9 <= p <= 2.1 for p in orders), orders


def test_vector_traction_data_converge():
    a, c, s = np.array([1.0, -0.5, 0.25]), np.array([0.1, 0.0, -0.05]), 0.3
    errs = []
    for h in (np.sqrt(2) / 10, 0.1):
        g = make_ball_grid(1.0, h)
        B = make_killing_basis(g)
        X, L = gaussian_test_form(g.points, a, c, s)
        d = g.points[g.boundary_nodes] - c
        gg = np.exp(-np.sum(d * d, axis=1) / (2 * s * s))
        J = -(d[:, :, None] * a[None, None, :]) * gg[:, None, None] / s**2  # J[n, k, l] = d_k X_l
        div = np.einsum("nkk->n", J)
        LX = J + np.swapaxes(J, 1, 2) - 2.0 / 3.0 * div[:, None, None] * np.eye(3)
        G = np.einsum("nk,nkl->nl", g.boundary_normals, LX)
        Zs = X - killing_project(B, OneFormField(g, X)).values
        Z = vector_bvp_solve(OneFormField(g, L), G, B)
        errs.append(np.abs(Z.values - Zs).max() / np.abs(Zs).max())
    assert errs[1] < 0.03
    assert observed_orders(errs, (np.sqrt(2) / 10, 0.1))[0] > 1.9
