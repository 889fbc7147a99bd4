"""Scalar Lichnerowicz-type equation  Delta v + h v = f v^5 + a v^-7  on a ball grid.

Also holds the exact bubble profiles, the pointwise floor of t -> f t^5 + b t^-7
and the enumeration of constant solutions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .errors import NonPositiveF, NonPositiveField, NotBracketing, PositivityLost, SolverDiverged
from .grid import BallGrid, ScalarField
from .operators import (
    Dirichlet,
    LinearSolverConfig,
    Robin,
    _Factored,
    resolve_method,
    scalar_rhs,
    scalar_system,
    solve_linear,
)

# ---------------------------------------------------------------------------
# bubbles


@dataclass(frozen=True)
class Bubble:
    mu: float
    center: tuple = (0.0, 0.0, 0.0)
    f_at_center: float = 0.75

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("bubble scale mu must be positive")
        if not self.f_at_center > 0:
            raise ValueError("f at the bubble center must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


def bubble_eval(b: Bubble, x) -> np.ndarray:
    """sqrt(2) mu^(1/2) (mu^2 + (4f/3)|x - center|^2)^(-1/2)."""
    x = np.asarray(x, dtype=float)
    d2 = np.sum((x - np.asarray(b.center)) ** 2, axis=-1)
    return np.sqrt(2.0 * b.mu) / np.sqrt(b.mu**2 + (4.0 * b.f_at_center / 3.0) * d2)


def bubble_field(grid: BallGrid, b: Bubble) -> ScalarField:
    return ScalarField(grid, bubble_eval(b, grid.points))


# ---------------------------------------------------------------------------
# algebraic pieces


def pointwise_floor(f: float, b: float) -> float:
    """min over t > 0 of f t^5 + b t^-7, i.e. (12b/5)(7b/(5f))^(-7/12); 0 when b = 0."""
    if not f > 0:
        raise NonPositiveF(f"f must be positive, got {f}")
    if b < 0:
        raise ValueError("b must be nonnegative")
    if b == 0:
        return 0.0
    return 12.0 * b / 5.0 * (7.0 * b / (5.0 * f)) ** (-7.0 / 12.0)


@dataclass(frozen=True)
class ConstantRoot:
    c: float
    kind: str  # "simple" | "tangent"
    derivative: float


def constant_branches(h0: float, f0: float, a0: float, tangent_tol: float = 1e-6) -> list:
    """Positive roots of g(c) = f0 c^5 + a0 c^-7 - h0 c.

    Multiplying by c^7 and writing s = c^4 gives the cubic f0 s^3 - h0 s^2 + a0 = 0,
    so every root (tangent ones included) is found from its companion matrix and
    then polished by Newton steps on g.  A root is tangent when
    |g'(c)| < tangent_tol * (5 f0 c^4 + 7 a0 c^-8 + |h0|).
    """
    if not f0 > 0:
        raise NonPositiveF(f"f0 must be positive, got {f0}")
    if a0 < 0:
        raise ValueError("a0 must be nonnegative")
    g = lambda c: f0 * c**5 + a0 * c**-7 - h0 * c
    dg = lambda c: 5 * f0 * c**4 - 7 * a0 * c**-8 - h0
    cand = np.roots([f0, -h0, 0.0, a0])
    found = []
    for s in cand:
        if abs(s.imag) > 1e-6 * max(abs(s), 1e-300) or s.real <= 0:
            continue
        c = s.real ** 0.25
        for _ in range(50):
            d = dg(c)
            if d == 0:
                break
            step = g(c) / d
            if not np.isfinite(step) or abs(step) > 0.5 * c:
                break
            c -= step
            if abs(step) < 1e-15 * c:
                break
        found.append(c)
    found.sort()
    roots = []
    for c in found:
        if roots and abs(c - roots[-1].c) < 1e-6 * c:
            # merged pair: polish as the critical point of g, a simple root of g'
            c = 0.5 * (c + roots[-1].c)
            for _ in range(50):
                step = dg(c) / (20 * f0 * c**3 + 56 * a0 * c**-9)
                c -= step
                if abs(step) < 1e-15 * c:
                    break
            roots[-1] = ConstantRoot(float(c), "tangent", float(dg(c)))
            continue
        scale = 5 * f0 * c**4 + 7 * a0 * c**-8 + abs(h0)
        d = dg(c)
        roots.append(ConstantRoot(float(c), "tangent" if abs(d) < tangent_tol * scale else "simple", float(d)))
    return roots


# ---------------------------------------------------------------------------
# the discrete problem


@dataclass(frozen=True, eq=False)
class ScalarProblem:
    """Delta v + h v = f v^5 + a v^-7 at interior nodes, ``bc`` on the boundary.

    ``form="conformal"`` uses the chart-conformal discretization of the
    Laplacian (exact on v = const * U); ``"euclid"`` the plain stencil.
    """

    grid: BallGrid
    h: np.ndarray
    f: np.ndarray
    a: np.ndarray
    bc: object = dc_field(default_factory=Robin)
    form: str = "euclid"

    def __post_init__(self):
        n = self.grid.n
        for name in ("h", "f", "a"):
            v = getattr(self, name)
            v = v.values if isinstance(v, ScalarField) else v
            v = np.array(np.broadcast_to(np.asarray(v, dtype=float), (n,)))
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if np.any(self.f <= 0):
            raise NonPositiveF("f must be positive at every node")
        if np.any(self.a < 0):
            raise ValueError("a must be nonnegative at every node")

    @property
    def interior(self):
        return self.grid.interior_mask


def _matrix(p: ScalarProblem, c):
    return scalar_system(p.grid, c, p.bc, p.form)


def _bc_values(p: ScalarProblem):
    return scalar_rhs(p.grid, np.zeros(p.grid.n), p.bc)


def residual_vector(p: ScalarProblem, v: np.ndarray) -> np.ndarray:
    """Interior: Delta v + h v - f v^5 - a v^-7.  Boundary: the BC residual."""
    A = _matrix(p, p.h)
    nl = np.where(p.interior, p.f * v**5 + p.a * v**-7.0, 0.0)
    return A @ v - nl - _bc_values(p)


def jacobian(p: ScalarProblem, v: np.ndarray):
    return _matrix(p, p.h - 5.0 * p.f * v**4 + 7.0 * p.a * v**-8.0)


def residual_eval(p: ScalarProblem, v) -> float:
    """max over interior nodes of |Delta v + h v - f v^5 - a v^-7|."""
    vals = v.values if isinstance(v, ScalarField) else np.asarray(v, float)
    if np.any(vals <= 0):
        raise NonPositiveField("residual needs a positive field")
    return float(np.max(np.abs(residual_vector(p, vals)[p.interior])))


def _term_scale(p: ScalarProblem, v):
    i = p.interior
    return max(np.max(np.abs(p.h * v)[i]), np.max((p.f * v**5)[i]), np.max((p.a * v**-7.0)[i]), 1e-300)


def relative_residual(p: ScalarProblem, v) -> float:
    r = residual_vector(p, v)
    return float(np.max(np.abs(r)) / _term_scale(p, v))


@dataclass
class SolveReport:
    iterations: int = 0
    residual_history: list = dc_field(default_factory=list)
    final_residual: float = float("nan")
    strategy: str = "newton"
    positivity_floor_used: float = 0.0
    converged: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass(frozen=True)
class NonlinearConfig:
    tol: float = 1e-10
    max_iter: int = 60
    max_halvings: int = 30
    armijo: float = 1e-4
    monotone_max_iter: int = 2000
    linear: LinearSolverConfig = LinearSolverConfig()


def lichnerowicz_solve(p: ScalarProblem, init, strategy: str = "newton", cfg: NonlinearConfig | None = None):
    """Solve the discrete problem from a positive initial guess.

    newton: damped Newton, step halving (factor 0.5, at most 30 times) until
    the iterate stays above the floor max(1e-8, 0.1 min init) and the max-norm
    residual decreases (Armijo).  monotone: shifted Picard iteration from a
    sub- or super-solution.  Returns (ScalarField, SolveReport).
    """
    cfg = cfg or NonlinearConfig()
    v = np.array(init.values if isinstance(init, ScalarField) else init, dtype=float)
    v = np.broadcast_to(v, (p.grid.n,)).copy()
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise NonPositiveField("initial guess must be positive and finite")
    floor = max(1e-8, 0.1 * float(v.min()))
    if strategy == "newton":
        return _newton(p, v, floor, cfg)
    if strategy == "monotone":
        return _monotone(p, v, floor, cfg)
    raise ValueError(f"unknown strategy {strategy!r}")


def _newton(p, v, floor, cfg):
    rep = SolveReport(strategy="newton", positivity_floor_used=floor)
    F = residual_vector(p, v)
    scale = _term_scale(p, v)
    rn = float(np.max(np.abs(F)))
    rep.residual_history.append(float(rn / scale))
    for it in range(cfg.max_iter):
        if rn / scale <= cfg.tol:
            rep.converged = True
            break
        d = solve_linear(jacobian(p, v), -F, cfg.linear)
        t = 1.0
        for _ in range(cfg.max_halvings + 1):
            trial = v + t * d
            if trial.min() >= floor:
                Ft = residual_vector(p, trial)
                rt = float(np.max(np.abs(Ft)))
                if rt <= (1.0 - cfg.armijo * t) * rn:
                    break
            t *= 0.5
        else:
            if (v + t * 2 * d).min() < floor:
                raise PositivityLost(f"no damped step keeps the iterate above the floor {floor:.3g}")
            raise SolverDiverged("line search failed to decrease the residual")
        v, F, rn = trial, Ft, rt
        scale = _term_scale(p, v)
        rep.iterations = it + 1
        rep.residual_history.append(float(rn / scale))
    else:
        rep.final_residual = rep.residual_history[-1]
        raise SolverDiverged(f"Newton did not converge in {cfg.max_iter} iterations "
                             f"(relative residual {rep.final_residual:.3g})")
    rep.final_residual = rep.residual_history[-1]
    return ScalarField(p.grid, v), rep


def _monotone(p, v, floor, cfg):
    rep = SolveReport(strategy="monotone", positivity_floor_used=floor)
    F = residual_vector(p, v)
    inner = p.interior
    tol_sign = 1e-12 * _term_scale(p, v)
    if np.all(F[inner] <= tol_sign):
        direction = 1.0  # sub-solution: iterates increase
    elif np.all(F[inner] >= -tol_sign):
        direction = -1.0
    else:
        raise NotBracketing("initial guess is neither a sub- nor a super-solution")

    # t -> 5 f t^4 + 7 a t^-8 is convex, so its sup over [lo, hi] sits at an end
    def shift_for(lo, hi):
        return np.maximum(5.0 * p.f * lo**4 + 7.0 * p.a * lo**-8.0, 5.0 * p.f * hi**4 + 7.0 * p.a * hi**-8.0)

    lo, hi = v.copy(), v.copy()
    M = shift_for(lo, hi)
    solver = None
    scale = _term_scale(p, v)
    rep.residual_history.append(float(np.max(np.abs(F)) / scale))
    bcv = _bc_values(p)
    for it in range(cfg.monotone_max_iter):
        if rep.residual_history[-1] <= cfg.tol:
            rep.converged = True
            break
        if solver is None:
            A = _matrix(p, p.h + M)
            if resolve_method(cfg.linear, p.grid.n) == "direct":
                solver = _Factored(A, cfg.linear).solve
            else:
                solver = lambda b, A=A: solve_linear(A, b, cfg.linear)
        rhs = np.where(inner, M * v + p.f * v**5 + p.a * v**-7.0, 0.0) + bcv
        new = solver(rhs)
        if new.min() < floor:
            raise PositivityLost("monotone iterate dropped below the positivity floor")
        lo, hi = np.minimum(lo, new), np.maximum(hi, new)
        need = shift_for(lo, hi)
        if np.any(need > M * (1 + 1e-12)):
            M = np.maximum(M, need) * 1.25  # ratchet the shift up and redo the step
            solver = None
            continue
        step = direction * (new - v)
        if np.any(step < -1e-10 * np.abs(v).max()):
            raise NotBracketing("monotone iteration lost monotonicity")
        v = new
        scale = _term_scale(p, v)
        rep.iterations = it + 1
        rep.residual_history.append(float(np.max(np.abs(residual_vector(p, v))) / scale))
    else:
        rep.final_residual = rep.residual_history[-1]
        raise SolverDiverged("monotone iteration did not converge")
    rep.final_residual = rep.residual_history[-1]
    return ScalarField(p.grid, v), rep


def jacobian_action(p: ScalarProblem, v, w) -> np.ndarray:
    return jacobian(p, np.asarray(v, float)) @ np.asarray(w, float)


def floor_heuristic(p: ScalarProblem) -> np.ndarray:
    """pointwise_floor(min f, min a) * w with (Delta + h) w = 1 under the problem's BC.

    For constant coefficients and an operator that is exact on constants this
    is the algebraic bound c >= floor / h satisfied by every constant root.
    """
    A = _matrix(p, p.h)
    rhs = np.where(p.interior, 1.0, 0.0)
    if isinstance(p.bc, Dirichlet):
        # boundary value of the constant-coefficient solution 1/h
        rhs = np.where(p.interior, rhs, np.where(p.h > 0, 1.0 / np.where(p.h > 0, p.h, 1.0), 0.0))
    w = solve_linear(A, rhs, LinearSolverConfig())
    return pointwise_floor(float(p.f.min()), float(p.a.min())) * w
