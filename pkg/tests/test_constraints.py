import warnings

import numpy as np
import pytest

from lichlab.constraints import (CoupledConfig, PhysicsData, SolutionPair, constant_potential, coupled_solve,
                                 dataparam_map, equation_residuals, fnorm, hypothesis_check, killing_defect,
                                 lie_h, mean_curvature, physical_constraint_residual, to_generalized, zero_tensor)
from lichlab.errors import NonPositiveF, NonPositiveField, ZeroBWarning
from lichlab.grid import OneFormField, ScalarField, SymTensorField, make_ball_grid


@pytest.fixture(scope="module")
def grid():
    return make_ball_grid(1.0, 0.2)


def constant_data(grid, tau=0.0, psi=0.0, pi=2.0):
    full = lambda c: ScalarField(grid, np.full(grid.n, float(c)))
    return PhysicsData(full(tau), full(psi), full(pi), zero_tensor(grid))


def start(grid):
    return SolutionPair(ScalarField(grid, np.ones(grid.n)), OneFormField(grid, np.zeros((grid.n, 3))))


def test_generalized_coefficients_canonical(grid):
    G = to_generalized(constant_data(grid), constant_potential(1.0))
    assert np.allclose(G.h.values, 0.75)
    assert np.allclose(G.f.values, 0.25)
    assert np.allclose(G.a_field(), 0.5)
    assert np.all(G.X.values == 0) and np.all(G.Y.values == 0)


def test_mean_curvature_enters_f(grid):
    G = to_generalized(constant_data(grid, tau=0.6), constant_potential(1.0))
    assert np.allclose(G.f.values, (2.0 - 2.0 / 3.0 * 0.36) / 8.0)


def test_nonpositive_f_rejected(grid):
    with pytest.raises(NonPositiveF):
        to_generalized(constant_data(grid, tau=2.0), constant_potential(1.0))


def test_zero_pi_warns(grid):
    with pytest.warns(ZeroBWarning):
        G = to_generalized(constant_data(grid, pi=0.0), constant_potential(1.0))
    assert not G.b_nonzero
    assert not hypothesis_check(G).ok


def test_hypotheses_hold_for_canonical_data(grid):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = hypothesis_check(to_generalized(constant_data(grid), constant_potential(1.0)))
    assert rep.ok
    assert rep.lambda_min > 0


def test_physics_data_validation(grid):
    full = ScalarField(grid, np.ones(grid.n))
    with pytest.raises(ValueError):
        PhysicsData(full, full, full, SymTensorField(grid, np.tile([1.0, 0, 0, 1.0, 0, 1.0], (grid.n, 1))))
    other = make_ball_grid(1.0, 0.25)
    with pytest.raises(ValueError):
        PhysicsData(full, ScalarField(other, np.ones(other.n)), full, zero_tensor(grid))


def test_fnorm_of_difference(grid):
    F1 = constant_data(grid, pi=2.0)
    F2 = constant_data(grid, pi=1.5)
    assert fnorm(F1 - F2) == pytest.approx(0.5)
    assert fnorm(F1 - F1) == 0.0


def test_potential_derivative_checked():
    from lichlab.constraints import Potential

    with pytest.raises(ValueError):
        Potential(lambda s: s**2, lambda s: np.zeros_like(s))


def test_lie_h_kills_sphere_killing_fields(grid):
    # U^4 times a flat conformal Killing field is a conformal Killing 1-form of the round metric
    from lichlab.chart import conf_factor
    from lichlab.killing import ckv_raw_fields

    U = conf_factor(grid.points)
    for K in ckv_raw_fields(grid.points)[[0, 1, 5, 8]]:
        W = OneFormField(grid, K * U[:, None] ** 4)
        L = lie_h(W).values[grid.interior_mask]
        assert np.abs(L).max() < 1e-10
        assert killing_defect(W) > 1e-3


def test_coupled_solve_canonical(grid):
    F = constant_data(grid)
    V = constant_potential(1.0)
    G = to_generalized(F, V)
    init = SolutionPair(ScalarField(grid, np.full(grid.n, 0.9)), OneFormField(grid, np.zeros((grid.n, 3))))
    sol, rep = coupled_solve(G, init, CoupledConfig(tol=1e-10))
    assert rep.converged
    assert np.abs(sol.phi.values - 1.0).max() < 1e-8
    assert np.all(sol.W.values == 0)
    rs, rv = equation_residuals(G, sol)
    assert rs < 1e-8 and rv == 0.0
    ham, mom = physical_constraint_residual(F, V, sol)
    assert ham < 1e-6 and mom < 1e-6


def test_coupled_solve_with_momentum_source(grid):
    x = grid.points
    full = lambda v: ScalarField(grid, v)
    F = PhysicsData(full(0.2 * x[:, 0]), full(0.1 * x[:, 1]), full(np.full(grid.n, 2.0)), zero_tensor(grid))
    G = to_generalized(F, constant_potential(1.0))
    sol, rep = coupled_solve(G, start(grid), CoupledConfig(tol=1e-9))
    assert rep.converged
    assert np.abs(sol.W.values).max() > 0
    rs, rv = equation_residuals(G, sol)
    assert rs < 1e-7
    assert rv < 1e-6 * max(1.0, np.abs(G.X.values).max())
    assert killing_defect(sol.W) < 1e-8


def test_dataparam_map_round_sphere(grid):
    F = constant_data(grid, tau=0.3)
    data = dataparam_map(F, start(grid))
    assert np.allclose(mean_curvature(data), 0.3)
    assert np.allclose(data.psi1.values, 2.0)
    with pytest.raises(NonPositiveField):
        SolutionPair(ScalarField(grid, np.zeros(grid.n)), OneFormField(grid, np.zeros((grid.n, 3))))
