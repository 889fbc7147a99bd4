"""Physics layer: scalar-field constraint data, the generalized coupled system,
its fixed-point solve, and reconstruction of the physical initial data.

Conventions.  Every field lives on a chart grid.  Scalars are sphere values
at the chart nodes (u[P]).  1-forms and symmetric tensors are stored by their
chart components (pullbacks by the inverse projection), so the round metric
has components U^4 delta.  The vector unknown is handled internally as
W^ = U^-4 W, for which L_h W = U^4 L_xi(W^) holds exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chart import conf_factor
from .errors import NonPositiveF, NonPositiveField, OuterStalled, SolverDiverged, ZeroBWarning
from .grid import BallGrid, OneFormField, ScalarField, SymTensorField, field_norm
from .killing import ckv_raw_fields, make_killing_basis
from .lichnerowicz import (
    NonlinearConfig,
    ScalarProblem,
    SolveReport,
    lichnerowicz_solve,
    residual_vector,
)
from .operators import LinearSolverConfig, Robin, VectorNeumannSolver, apply_operator, scalar_principal_matrix

SPHERE_SCALAR_CURVATURE = 6.0
A_SCALE = 1.0 / 8.0


@dataclass(frozen=True)
class Potential:
    """V and its derivative, both vectorized maps from reals to reals."""

    V: Callable
    dV: Callable
    check_range: tuple = (-2.0, 2.0)

    def __post_init__(self):
        s = np.linspace(*self.check_range, 41)
        eps = 1e-5
        fd = (np.asarray(self.V(s + eps), float) - np.asarray(self.V(s - eps), float)) / (2 * eps)
        d = np.broadcast_to(np.asarray(self.dV(s), float), s.shape)
        if not np.allclose(fd, d, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(d).max())):
            raise ValueError("dV does not match finite differences of V")

    def __call__(self, s):
        s = np.asarray(s, float)
        return np.broadcast_to(np.asarray(self.V(s), float), s.shape)

    def derivative(self, s):
        s = np.asarray(s, float)
        return np.broadcast_to(np.asarray(self.dV(s), float), s.shape)


def constant_potential(value: float) -> Potential:
    return Potential(lambda s: np.full_like(np.asarray(s, float), value), lambda s: np.zeros_like(np.asarray(s, float)))


@dataclass(frozen=True, eq=False)
class PhysicsData:
    tau: ScalarField
    psi: ScalarField
    pi: ScalarField
    U: SymTensorField

    def __post_init__(self):
        g = self.tau.grid
        for f in (self.psi, self.pi, self.U):
            if not f.grid.same_as(g):
                raise ValueError("physics data must share one grid")
        tr = np.abs(self.U.trace())
        if np.any(tr > 1e-10 * np.maximum(1.0, np.abs(self.U.values).max(axis=1))):
            raise ValueError("U must be traceless")

    @property
    def grid(self) -> BallGrid:
        return self.tau.grid

    def divergence_defect(self) -> float:
        """max |div U| over interior nodes (reported, not enforced)."""
        if not np.any(self.U.values):
            return 0.0
        d = apply_operator("tensor-div", self.U).values
        return float(np.abs(d[self.grid.interior_mask]).max())

    def __sub__(self, other: "PhysicsData") -> "PhysicsData":
        return PhysicsData(self.tau - other.tau, self.psi - other.psi, self.pi - other.pi,
                           SymTensorField(self.grid, self.U.values - other.U.values, traceless=True))


def zero_tensor(grid: BallGrid) -> SymTensorField:
    return SymTensorField(grid, np.zeros((grid.n, 6)), traceless=True)


def fnorm(F: PhysicsData) -> float:
    return (field_norm(F.tau, "C2") + field_norm(F.psi, "C1") + field_norm(F.pi, "C0")
            + field_norm(F.U, "C0"))


# ---------------------------------------------------------------------------
# chart helpers


def _U(grid):
    return conf_factor(grid.points)


def _gradient(f: ScalarField) -> np.ndarray:
    return apply_operator("gradient", f).values


def _sq_norm_h_tensor(T: np.ndarray, U: np.ndarray) -> np.ndarray:
    """|T|_h^2 for chart components T (n, 3, 3) of a covariant 2-tensor."""
    return np.einsum("nij,nij->n", T, T) / U**8


def lie_h(W: OneFormField) -> SymTensorField:
    """Chart components of L_h W, computed as U^4 L_xi(U^-4 W)."""
    U = _U(W.grid)
    What = OneFormField(W.grid, W.values / U[:, None] ** 4)
    L = apply_operator("cko", What)
    return SymTensorField(W.grid, L.values * U[:, None] ** 4, traceless=True)


@dataclass(frozen=True, eq=False)
class CoefficientBundle:
    R_psi: ScalarField
    B: ScalarField
    A: Callable  # W -> ScalarField
    vector_rhs: Callable  # phi -> OneFormField


def assemble_coefficients(F: PhysicsData, V: Potential) -> CoefficientBundle:
    grid = F.grid
    U = _U(grid)
    dpsi = _gradient(F.psi)
    R_psi = (SPHERE_SCALAR_CURVATURE - np.sum(dpsi**2, axis=1) / U**4) / 8.0
    B = (2.0 * V(F.psi.values) - (2.0 / 3.0) * F.tau.values**2) / 8.0
    dtau = _gradient(F.tau)

    def A(W: OneFormField | None = None) -> ScalarField:
        T = F.U.matrices()
        if W is not None:
            T = T + lie_h(W).matrices()
        return ScalarField(grid, A_SCALE * (_sq_norm_h_tensor(T, U) + F.pi.values**2))

    def vector_rhs(phi) -> OneFormField:
        ph = phi.values if isinstance(phi, ScalarField) else np.asarray(phi, float)
        return OneFormField(grid, -(2.0 / 3.0) * ph[:, None] ** 6 * dtau - F.pi.values[:, None] * dpsi)

    return CoefficientBundle(ScalarField(grid, R_psi), ScalarField(grid, B), A, vector_rhs)


@dataclass(frozen=True, eq=False)
class GeneralizedCoefficients:
    h: ScalarField
    f: ScalarField
    b: ScalarField
    U: SymTensorField
    X: OneFormField
    Y: OneFormField
    a_scale: float = A_SCALE
    b_nonzero: bool = True

    def __post_init__(self):
        if np.any(self.f.values <= 0):
            raise NonPositiveF("f must be positive")
        if np.any(self.b.values < 0):
            raise ValueError("b must be nonnegative")

    @property
    def grid(self) -> BallGrid:
        return self.h.grid

    def a_field(self, W: OneFormField | None = None) -> np.ndarray:
        """a = a_scale (|U + L_h W|_h^2 + b)."""
        T = self.U.matrices()
        if W is not None:
            T = T + lie_h(W).matrices()
        return self.a_scale * (_sq_norm_h_tensor(T, _U(self.grid)) + self.b.values)


def to_generalized(F: PhysicsData, V: Potential) -> GeneralizedCoefficients:
    c = assemble_coefficients(F, V)
    if np.any(c.B.values <= 0):
        raise NonPositiveF(f"B = (2V(psi) - 2 tau^2/3)/8 must be positive (min {c.B.values.min():.3g})")
    grid = F.grid
    b = F.pi.values**2
    nonzero = bool(b.max() > 1e-12)
    if not nonzero:
        warnings.warn("pi vanishes identically; the nonzero-b hypothesis fails", ZeroBWarning)
    X = OneFormField(grid, -(2.0 / 3.0) * _gradient(F.tau))
    Y = OneFormField(grid, -F.pi.values[:, None] * _gradient(F.psi))
    return GeneralizedCoefficients(c.R_psi, c.B, ScalarField(grid, b), F.U, X, Y, A_SCALE, nonzero)


# ---------------------------------------------------------------------------
# chart scalar problem and hypotheses


def chart_scalar_problem(G: GeneralizedCoefficients, W: OneFormField | None = None) -> ScalarProblem:
    """Problem for v = phi U: Delta v + (h - 3/4) U^4 v = f v^5 + U^12 a v^-7."""
    U = _U(G.grid)
    return ScalarProblem(G.grid, (G.h.values - 0.75) * U**4, G.f.values, U**12 * G.a_field(W),
                         Robin("conformal"), "conformal")


@dataclass
class HypothesisReport:
    coercive: bool
    lambda_min: float
    lambda_min_half_radius: float | None
    f_positive: bool
    b_nonzero: bool

    @property
    def ok(self) -> bool:
        return self.coercive and self.f_positive and self.b_nonzero


def coercivity_estimate(grid: BallGrid, h_values, max_iter: int = 500, tol: float = 1e-10) -> float:
    """Bottom eigenvalue of Delta_h + h on the chart (weight U^4), by inverse power iteration."""
    from .operators import _Factored, scalar_system

    U = _U(grid)
    hv = np.broadcast_to(np.asarray(h_values, float), (grid.n,))
    w = np.where(grid.interior_mask, U**4, 0.0)
    sigma = max(0.0, -float(hv.min())) + 1.0  # makes every eigenvalue >= 1
    A = scalar_system(grid, (hv - 0.75 + sigma) * U**4, Robin("conformal"), "conformal")
    fac = _Factored(A, LinearSolverConfig())
    x = np.ones(grid.n)
    lam = np.nan
    for _ in range(max_iter):
        y = fac.solve(w * x)
        new = float((x @ (w * x)) / (x @ (w * y)))
        x = y / np.sqrt(y @ (w * y))
        if np.isfinite(lam) and abs(new - lam) <= tol * max(1.0, abs(new)):
            return new - sigma
        lam = new
    raise SolverDiverged("inverse power iteration did not converge")


def hypothesis_check(G: GeneralizedCoefficients) -> HypothesisReport:
    grid = G.grid
    lam = coercivity_estimate(grid, G.h.values)
    lam_half = None
    if grid.R / 2 >= 4 * grid.h:
        from .grid import make_ball_grid, restrict

        sub = make_ball_grid(grid.R / 2, grid.h)
        lam_half = coercivity_estimate(sub, restrict(G.h, sub).values)
    return HypothesisReport(lam > 0, lam, lam_half, bool(np.all(G.f.values > 0)), bool(G.b.values.max() > 1e-12))


# ---------------------------------------------------------------------------
# coupled solve


@dataclass(frozen=True, eq=False)
class SolutionPair:
    phi: ScalarField
    W: OneFormField

    def __post_init__(self):
        if np.any(self.phi.values <= 0):
            raise NonPositiveField("phi must be positive")


@dataclass(frozen=True)
class CoupledConfig:
    tol: float = 1e-8
    max_outer: int = 50
    stall_window: int = 10
    strategy: str = "auto"  # auto | newton | monotone
    nonlinear: NonlinearConfig = NonlinearConfig()
    linear: LinearSolverConfig = LinearSolverConfig()


class _VectorStep:
    """Chart form of vecLap_h W = rhs with Killing-orthogonal W, built lazily."""

    def __init__(self, grid: BallGrid, cfg: LinearSolverConfig):
        self.grid = grid
        self.cfg = cfg
        self._solver = None
        U = _U(grid)
        self.U = U
        self.basis = make_killing_basis(grid, weight=U**10)

    def solve(self, rhs: OneFormField) -> OneFormField:
        if not np.any(rhs.values[self.grid.interior_mask]):
            return OneFormField(self.grid, np.zeros((self.grid.n, 3)))
        if self._solver is None:
            drift = 3.0 * self.grid.points * self.U[:, None] ** 2  # -6 U^-1 dU
            self._solver = VectorNeumannSolver(self.grid, self.basis, self.cfg, drift=drift,
                                               orth_weight=self.U**10, mult_weight=self.U**4)
        What = self._solver.solve(rhs, None, check_compat=False)
        return OneFormField(self.grid, What.values * self.U[:, None] ** 4)


def killing_defect(W: OneFormField) -> float:
    """max_j |<W, Z_j>_h| over an orthonormal basis of sphere conformal Killing fields."""
    grid = W.grid
    U = _U(grid)
    basis = make_killing_basis(grid, weight=U**10)
    What = W.values / U[:, None] ** 4
    return float(max(abs(np.sum(U[:, None] ** 10 * What * K.values) * grid.cell_volume) for K in basis.fields))


def _pick_strategy(p: ScalarProblem, v: np.ndarray, strategy: str) -> str:
    if strategy != "auto":
        return strategy
    F = residual_vector(p, v)[p.interior]
    tol = 1e-12 * max(1.0, np.abs(F).max())
    return "monotone" if (np.all(F <= tol) or np.all(F >= -tol)) else "newton"


def coupled_solve(G: GeneralizedCoefficients, init: SolutionPair, cfg: CoupledConfig | None = None):
    """Alternate the scalar and vector equations until the relative update is below cfg.tol."""
    cfg = cfg or CoupledConfig()
    grid = G.grid
    U = _U(grid)
    vec_step = _VectorStep(grid, cfg.linear)
    phi = init.phi.values.copy()
    W = init.W
    LW = lie_h(W).values
    rep = SolveReport(strategy=f"coupled/{cfg.strategy}")
    best, since_best = np.inf, 0
    for k in range(cfg.max_outer):
        p = chart_scalar_problem(G, W)
        v0 = phi * U
        strat = _pick_strategy(p, v0, cfg.strategy)
        v, inner_rep = lichnerowicz_solve(p, v0, strat, cfg.nonlinear)
        phi_new = v.values / U
        rhs = OneFormField(grid, phi_new[:, None] ** 6 * G.X.values + G.Y.values)
        W_new = vec_step.solve(rhs)
        LW_new = lie_h(W_new).values
        upd = max(np.abs(phi_new - phi).max() / np.abs(phi_new).max(),
                  np.abs(LW_new - LW).max() / max(1.0, np.abs(LW_new).max()))
        phi, W, LW = phi_new, W_new, LW_new
        rep.iterations = k + 1
        rep.residual_history.append(float(upd))
        rep.positivity_floor_used = inner_rep.positivity_floor_used
        if upd < cfg.tol:
            rep.converged = True
            break
        if upd < 0.5 * best:
            best, since_best = upd, 0
        else:
            since_best += 1
            if since_best >= cfg.stall_window:
                raise OuterStalled(f"outer update stuck near {upd:.3g} for {cfg.stall_window} iterations")
    else:
        raise SolverDiverged(f"coupled iteration did not converge in {cfg.max_outer} outer steps")
    rep.final_residual = rep.residual_history[-1]
    return SolutionPair(ScalarField(grid, phi), W), rep


def equation_residuals(G: GeneralizedCoefficients, sol: SolutionPair,
                       modulo_killing: bool = True) -> tuple[float, float]:
    """Max-norm residuals of the chart scalar equation and of the vector equation (interior).

    On the truncated chart the vector solve carries Lagrange multipliers along
    U^4 K_l; with ``modulo_killing`` the vector residual is measured after a
    least-squares removal of that span.
    """
    grid = G.grid
    U = _U(grid)
    p = chart_scalar_problem(G, sol.W)
    rs = float(np.abs(residual_vector(p, sol.phi.values * U)[grid.interior_mask]).max())
    What = OneFormField(grid, sol.W.values / U[:, None] ** 4)
    LW = apply_operator("cko", What).matrices()
    lhs = apply_operator("vec-laplacian", What).values + 3.0 * U[:, None] ** 2 * np.einsum("nij,nj->ni", LW, grid.points)
    rhs = sol.phi.values[:, None] ** 6 * G.X.values + G.Y.values
    r = (lhs - rhs)[grid.interior_mask]
    if modulo_killing:
        Z = (ckv_raw_fields(grid.points[grid.interior_mask]) * U[grid.interior_mask, None] ** 4).reshape(10, -1).T
        coef, *_ = np.linalg.lstsq(Z, r.ravel(), rcond=None)
        r = r.ravel() - Z @ coef
    return rs, float(np.abs(r).max())


# ---------------------------------------------------------------------------
# physical data


@dataclass(frozen=True, eq=False)
class PhysicalInitialData:
    metric_factor: ScalarField  # phi^4, the metric being phi^4 h
    K: SymTensorField
    psi0: ScalarField
    psi1: ScalarField


def dataparam_map(F: PhysicsData, sol: SolutionPair) -> PhysicalInitialData:
    grid = F.grid
    phi = sol.phi.values
    if np.any(phi <= 0):
        raise NonPositiveField("phi must be positive")
    U = _U(grid)
    T = F.U.matrices() + lie_h(sol.W).matrices()
    K = ((F.tau.values / 3.0) * phi**4 * U**4)[:, None, None] * np.eye(3) + phi[:, None, None] ** -2 * T
    return PhysicalInitialData(ScalarField(grid, phi**4), SymTensorField.from_matrices(grid, K),
                               F.psi, ScalarField(grid, phi**-6 * F.pi.values))


def mean_curvature(data: PhysicalInitialData) -> np.ndarray:
    """tr_{phi^4 h} K at every node."""
    U = _U(data.K.grid)
    return data.K.trace() / (data.metric_factor.values * U**4)


def physical_constraint_residual(F: PhysicsData, V: Potential, sol: SolutionPair) -> tuple[float, float]:
    """Max interior residuals of the Hamiltonian and momentum constraints.

    The metric phi^4 h has chart form v^4 xi with v = phi U, so its scalar
    curvature is 8 v^-5 Delta_xi v (geometer's Laplacian, conformal stencil)
    and its Christoffel symbols follow from sigma = 2 log v.
    """
    grid = F.grid
    data = dataparam_map(F, sol)
    U = _U(grid)
    v = sol.phi.values * U
    inn = grid.interior_mask
    Lv = scalar_principal_matrix(grid, "conformal") @ v
    R = 8.0 * Lv / v**5
    K = data.K.matrices()
    trK_xi = np.einsum("nii->n", K)
    trK = trK_xi / v**4
    normK2 = np.einsum("nij,nij->n", K, K) / v**8
    dpsi0 = _gradient(data.psi0)
    ham = R + trK**2 - normK2 - data.psi1.values**2 - np.sum(dpsi0**2, axis=1) / v**4 - 2.0 * V(data.psi0.values)
    # divergence in the metric v^4 xi: v^-4 (d_j K_ij - trK_xi d_i sigma + K_il d_l sigma)
    dsig = 2.0 * _gradient(ScalarField(grid, v)) / v[:, None]
    divK = apply_operator("tensor-div", data.K).values
    div_g = (divK - trK_xi[:, None] * dsig + np.einsum("nil,nl->ni", K, dsig)) / v[:, None] ** 4
    mom = div_g - _gradient(ScalarField(grid, trK)) - data.psi1.values[:, None] * dpsi0
    return float(np.abs(ham[inn]).max()), float(np.abs(mom[inn]).max())
