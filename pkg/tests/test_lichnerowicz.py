import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lichlab.errors import NonPositiveF, NonPositiveField, NotBracketing
from lichlab.grid import make_ball_grid
from lichlab.lichnerowicz import (Bubble, ScalarProblem, bubble_eval, constant_branches, floor_heuristic,
                                  lichnerowicz_solve, pointwise_floor, relative_residual, residual_eval)
from lichlab.operators import Dirichlet, Robin
from oracles import floor_oracle

H0, F0, A0 = 0.75, 0.25, 0.5
SECOND_ROOT = (1 + np.sqrt(3)) ** 0.25


@pytest.fixture(scope="module")
def grid():
    return make_ball_grid(1.0, 0.2)


def constant_problem(grid, c):
    return ScalarProblem(grid, H0, F0, A0, Dirichlet(np.full(grid.n, c)))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10))
def test_floor_matches_oracle(f, b):
    assert pointwise_floor(f, b) == pytest.approx(floor_oracle(f, b), rel=1e-10)


def test_floor_anchor_and_edge_cases():
    assert pointwise_floor(1.0, 1.0) == pytest.approx(1.9722859800819115, rel=1e-14)
    assert pointwise_floor(2.0, 0.0) == 0.0
    with pytest.raises(NonPositiveF):
        pointwise_floor(0.0, 1.0)
    with pytest.raises(ValueError):
        pointwise_floor(1.0, -1.0)


def test_constant_branches_canonical():
    roots = constant_branches(H0, F0, A0)
    assert [r.kind for r in roots] == ["simple", "simple"]
    assert roots[0].c == pytest.approx(1.0, abs=1e-12)
    assert roots[1].c == pytest.approx(SECOND_ROOT, abs=1e-12)


def test_constant_branches_tangent_and_none():
    # s = c^4 solves f s^3 - h s^2 + a = 0; (s - 1)^2 (s/2 + 1/4) has a double root at s = 1
    roots = constant_branches(0.75, 0.5, 0.25)
    assert len(roots) == 1 and roots[0].kind == "tangent"
    assert roots[0].c == pytest.approx(1.0, abs=1e-6)
    assert constant_branches(0.1, 1.0, 1.0) == []
    with pytest.raises(NonPositiveF):
        constant_branches(1.0, -1.0, 1.0)


def test_every_constant_root_respects_floor():
    for h0, f0, a0 in ((H0, F0, A0), (2.0, 0.3, 0.1), (5.0, 1.0, 2.0)):
        roots = constant_branches(h0, f0, a0)
        assert roots
        for r in roots:
            # h c = f c^5 + a c^-7 at a root, and the right side never drops below the floor
            assert h0 * r.c >= pointwise_floor(f0, a0) * (1 - 1e-12)


def test_bubble_center_value_and_symmetry():
    b = Bubble(0.5, center=(0.1, 0.0, 0.0))
    assert bubble_eval(b, np.array(b.center)) == pytest.approx(np.sqrt(2 / 0.5), abs=1e-14)
    x = np.array([[0.3, 0.1, 0.0], [-0.1, -0.1, 0.0]])
    v = bubble_eval(b, x)
    assert v[0] == pytest.approx(v[1])
    with pytest.raises(ValueError):
        Bubble(0.0)


def test_problem_rejects_nonpositive_f(grid):
    with pytest.raises(NonPositiveF):
        ScalarProblem(grid, 1.0, np.where(grid.points[:, 0] > 0, 1.0, 0.0), 0.0)


@pytest.mark.parametrize("strategy", ["newton", "monotone"])
def test_solvers_reach_constant_root(grid, strategy):
    p = constant_problem(grid, 1.0)
    v, rep = lichnerowicz_solve(p, np.full(grid.n, 0.8), strategy=strategy)
    assert rep.converged
    assert np.abs(v.values - 1.0).max() < 1e-8
    assert residual_eval(p, v) < 1e-8


def test_newton_converges_quadratically(grid):
    p = constant_problem(grid, SECOND_ROOT)
    v, rep = lichnerowicz_solve(p, np.full(grid.n, 1.25))
    assert np.abs(v.values - SECOND_ROOT).max() < 1e-10
    hist = rep.residual_history
    assert rep.iterations <= 8
    assert hist[-1] < hist[0] * 1e-8


def test_monotone_needs_bracketing_guess(grid):
    p = constant_problem(grid, 1.0)
    init = 1.0 + 0.1 * np.sin(7 * grid.points[:, 0])
    with pytest.raises(NotBracketing):
        lichnerowicz_solve(p, init, strategy="monotone")


def test_positive_initial_guess_required(grid):
    p = constant_problem(grid, 1.0)
    with pytest.raises(NonPositiveField):
        lichnerowicz_solve(p, np.zeros(grid.n))
    with pytest.raises(ValueError):
        lichnerowicz_solve(p, np.ones(grid.n), strategy="picard")


def test_solve_report_json(grid):
    _, rep = lichnerowicz_solve(constant_problem(grid, 1.0), np.full(grid.n, 0.9))
    data = json.loads(rep.to_json())
    assert data["converged"] is True
    assert data["strategy"] == "newton"
    assert len(data["residual_history"]) == data["iterations"] + 1


def test_robin_problem_solution_is_positive(grid):
    p = ScalarProblem(grid, 0.0, 1.0, 0.5, Robin("decay"))
    v, rep = lichnerowicz_solve(p, np.full(grid.n, 0.8))
    assert rep.converged and v.values.min() > 0
    assert relative_residual(p, v.values) < 1e-9


def test_floor_heuristic_constant_case(grid):
    p = constant_problem(grid, 1.0)
    w = floor_heuristic(p)
    assert np.allclose(w, pointwise_floor(F0, A0) / H0, rtol=1e-9)
    for r in constant_branches(H0, F0, A0):
        assert r.c >= w.max() - 1e-12
