"""Measurements on solutions: blow-up synthesis and detection, Harnack ratios,
Pohozaev residuals, the bubble-driven vector field and the stability experiment.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainTooSmall, LichLabError, NoCriticalPoints, NonPositiveField
from .grid import AXES, BallGrid, ScalarField, SymTensorField, field_norm
from .killing import kernel_gradient, kernel_matrix
from .lichnerowicz import Bubble, bubble_eval
from .operators import apply_operator

# ---------------------------------------------------------------------------
# blow-up fields


def synthesize_blowup_field(bubbles, background: ScalarField) -> ScalarField:
    grid = background.grid
    if np.any(background.values < 0):
        raise ValueError("background must be nonnegative")
    out = background.values.copy()
    for b in bubbles:
        if np.linalg.norm(b.center) >= grid.R:
            raise ValueError(f"bubble center {b.center} outside the grid")
        out += bubble_eval(b, grid.points)
    return ScalarField(grid, out)


@dataclass
class ConcentrationReport:
    points: list  # (node index, coordinates)
    local_scales: list
    separation_ok: bool
    separation_min: float
    bound_constant: float

    def to_json(self) -> str:
        d = asdict(self)
        d["points"] = [(int(i), [float(c) for c in x]) for i, x in self.points]
        return json.dumps(d, indent=2)


def concentration_detect(u: ScalarField, Lw: SymTensorField | None = None, threshold: float = 0.5,
                         tol: float = 1e-6) -> ConcentrationReport:
    """Greedy extraction of concentration points.

    Candidates are interior strict local maxima whose centered gradient moves
    u by less than ``threshold * u`` over one cell.  They are taken by
    decreasing height and kept when d^(1/2) u(x) >= 1 against every point kept
    so far.  The local scale is 2 u(x_i)^-2, matching u(x_i) = sqrt(2) mu^-1/2
    at a bubble center.
    """
    grid = u.grid
    vals = u.values
    if np.any(vals <= 0):
        raise NonPositiveField("u must be positive")
    inn = grid.interior_nodes
    is_max = np.ones(len(inn), bool)
    for k in range(3):
        for s in (1, -1):
            nb = grid.neighbor(s * AXES[k])[inn]
            is_max &= vals[inn] > vals[nb]
    grad = apply_operator("gradient", u).values[inn]
    small = np.linalg.norm(grad, axis=1) * grid.h < threshold * vals[inn]
    cand = inn[is_max & small]
    if cand.size == 0:
        raise NoCriticalPoints("no strict local maximum of u")
    cand = cand[np.argsort(-vals[cand], kind="stable")]
    kept = []
    for c in cand:
        x = grid.points[c]
        if all(np.sqrt(np.linalg.norm(x - grid.points[k])) * vals[c] >= 1.0 for k in kept):
            kept.append(int(c))
    pts = [(k, grid.points[k].copy()) for k in kept]
    sep = np.inf
    for i in kept:
        for j in kept:
            if i != j:
                sep = min(sep, np.sqrt(np.linalg.norm(grid.points[i] - grid.points[j])) * vals[i])
    dmin = np.min(np.linalg.norm(grid.points[:, None, :] - grid.points[kept][None, :, :], axis=2), axis=1)
    lw = 0.0 if Lw is None else np.sqrt(np.einsum("nij,nij->n", Lw.matrices(), Lw.matrices()))
    functional = dmin**3 * (vals**6 + lw)
    return ConcentrationReport(pts, [2.0 / vals[k] ** 2 for k in kept], bool(sep >= 1.0 - tol), float(sep),
                               float(functional.max()))


def harnack_ratio(u: ScalarField, inner_radius: float, outer_radius: float) -> float:
    """sup u / inf u over the nodes of B(inner_radius); u must be positive on B(outer_radius)."""
    if not 0 < inner_radius <= outer_radius:
        raise ValueError("need 0 < inner_radius <= outer_radius")
    r = u.grid.radii
    outer = r <= outer_radius + 1e-12
    if np.any(u.values[outer] <= 0):
        raise NonPositiveField("u must be positive on the outer ball")
    sel = u.values[r <= inner_radius + 1e-12]
    return float(sel.max() / sel.min())


# ---------------------------------------------------------------------------
# Pohozaev identity


def trilinear(grid: BallGrid, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of nodal values (n,) or (n, k) at points (m, 3)."""
    pts = np.asarray(pts, float)
    t = pts / grid.h
    base = np.floor(t).astype(int)
    frac = t - base
    out = 0.0
    for corner in np.ndindex(2, 2, 2):
        c = np.array(corner)
        node = grid.locate(base + c)
        if np.any(node < 0):
            raise DomainTooSmall("interpolation point too close to the grid boundary")
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        v = values[node]
        out = out + (w[:, None] * v if v.ndim == 2 else w * v)
    return out


def _sphere_rule(n_theta: int):
    """Gauss-Legendre in cos(theta) times a uniform azimuth: (directions, weights) on S^2."""
    u, wu = np.polynomial.legendre.leggauss(n_theta)
    n_phi = 2 * n_theta
    phi = 2 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    s = np.sqrt(1 - u**2)
    dirs = np.stack([np.outer(s, np.cos(phi)), np.outer(s, np.sin(phi)), np.outer(u, np.ones(n_phi))], axis=-1)
    w = np.outer(wu, np.full(n_phi, 2 * np.pi / n_phi))
    return dirs.reshape(-1, 3), w.ravel()


def pohozaev_residual(v: ScalarField, delta: float, center=(0.0, 0.0, 0.0)) -> float:
    """|LHS - RHS| of the Pohozaev identity on B(center, delta).

    LHS = int_B (x.grad v + v/2) Delta v, RHS = int_dB (delta/2 |grad v|^2 - v d_nu v / 2 - delta (d_nu v)^2),
    with x measured from ``center``.  Nodal derivatives come from the discrete
    operators; both integrals use Gauss rules in spherical coordinates on the
    trilinear interpolant.
    """
    grid = v.grid
    h = grid.h
    if delta < 8 * h:
        raise DomainTooSmall(f"delta = {delta} below 8h = {8 * h}")
    c = np.asarray(center, float)
    if np.linalg.norm(c) + delta > grid.R - 2 * np.sqrt(3) * h:
        raise DomainTooSmall("ball B(center, delta) does not fit inside the grid interior")
    grad = apply_operator("gradient", v).values
    lap = apply_operator("laplacian", v).values
    x = grid.points - c
    dens = (np.sum(x * grad, axis=1) + 0.5 * v.values) * lap

    n_theta = max(16, int(np.ceil(2 * delta / h)))
    dirs, wd = _sphere_rule(n_theta)
    n_r = max(16, int(np.ceil(4 * delta / h)))
    rr, wr = np.polynomial.legendre.leggauss(n_r)
    rr = 0.5 * delta * (rr + 1)
    wr = 0.5 * delta * wr
    lhs = 0.0
    for r, w in zip(rr, wr):
        lhs += w * r * r * np.dot(wd, trilinear(grid, dens, c + r * dirs))
    pts = c + delta * dirs
    g = trilinear(grid, grad, pts)
    vv = trilinear(grid, v.values, pts)
    dn = np.sum(g * dirs, axis=1)
    integrand = 0.5 * delta * np.sum(g * g, axis=1) - 0.5 * vv * dn - delta * dn**2
    rhs = delta**2 * np.dot(wd, integrand)
    return float(abs(lhs - rhs))


# ---------------------------------------------------------------------------
# bubble-driven vector field


@dataclass
class BubbleVectorResult:
    points: np.ndarray
    values: np.ndarray  # V at the points, (m, 3)
    lie: np.ndarray  # L_xi V at the points, (m, 3, 3)
    limit: np.ndarray | None  # P(x - center) for zeta = X0/|X0|, (m, 3, 3)

    def rescaled(self, X0) -> np.ndarray:
        return self.lie / np.linalg.norm(X0)

    def entry_error(self, X0, i: int, j: int) -> np.ndarray:
        """Relative error of the rescaled (i, j) entry against the limit (0-based indices)."""
        return np.abs(self.rescaled(X0)[:, i, j] - self.limit[:, i, j]) / np.abs(self.limit[:, i, j])


def pij_limit(x, zeta, f0: float) -> np.ndarray:
    """P_ij(x) = (3 pi/8)(3/(4 f0))^(3/2) |x|^-3 ((zeta.x)(delta - x x/|x|^2) - x zeta - zeta x)."""
    x = np.atleast_2d(np.asarray(x, float))
    z = np.asarray(zeta, float)
    r = np.linalg.norm(x, axis=1)
    zx = x @ z
    eye = np.eye(3)
    P = (zx[:, None, None] * (eye - x[:, :, None] * x[:, None, :] / (r**2)[:, None, None])
         - x[:, :, None] * z[None, None, :] - z[None, :, None] * x[:, None, :])
    return (3 * np.pi / 8) * (3 / (4 * f0)) ** 1.5 * P / (r**3)[:, None, None]


def bubble_vector_field(X0, b: Bubble, eval_points, n_radial: int = 96, n_theta: int = 64) -> BubbleVectorResult:
    """V_i(x) = X0^j int B^6(y) H_ij(x - y) dy over R^3, and L_xi V, by quadrature.

    Spherical coordinates about the bubble center, with the polar axis turned
    towards the evaluation point.  The radius is mapped by rho = mu k^-1/2 tan t
    (k = 4f/3) and split at the evaluation radius, where the kernel is singular.
    """
    X0 = np.asarray(X0, float)
    pts = np.atleast_2d(np.asarray(eval_points, float))
    c = np.asarray(b.center)
    k = 4.0 * b.f_at_center / 3.0
    scale = b.mu / np.sqrt(k)
    dirs0, wd = _sphere_rule(n_theta)
    tg, wg = np.polynomial.legendre.leggauss(n_radial)
    vals = np.zeros((len(pts), 3))
    lie = np.zeros((len(pts), 3, 3))
    if not np.any(X0):
        return BubbleVectorResult(pts, vals, lie, None)
    for m, x in enumerate(pts):
        d = x - c
        rstar = np.linalg.norm(d)
        if rstar == 0:
            raise ValueError("evaluation point at the bubble center")
        # rotation taking e3 to d/|d|
        e3 = d / rstar
        a = np.array([1.0, 0, 0]) if abs(e3[0]) < 0.9 else np.array([0, 1.0, 0])
        e1 = a - (a @ e3) * e3
        e1 /= np.linalg.norm(e1)
        Rm = np.stack([e1, np.cross(e3, e1), e3], axis=1)
        dirs = dirs0 @ Rm.T
        ts = np.arctan(rstar / scale)
        Vx = np.zeros(3)
        dV = np.zeros((3, 3))  # dV[i, l] = d_l V_i
        for lo, hi in ((0.0, ts), (ts, np.pi / 2)):
            t = 0.5 * (hi - lo) * (tg + 1) + lo
            wt = 0.5 * (hi - lo) * wg
            rho = scale * np.tan(t)
            jac = scale / np.cos(t) ** 2
            B6 = bubble_eval(b, c + rho[:, None] * np.array([1.0, 0, 0])) ** 6
            for rr, w in zip(rho, wt * jac * B6 * rho**2):
                z = x - (c + rr * dirs)
                Vx += w * np.einsum("q,qij,j->i", wd, kernel_matrix(z), X0)
                dV += w * np.einsum("q,qijl,j->il", wd, kernel_gradient(z), X0)
        vals[m] = Vx
        div = np.trace(dV)
        lie[m] = dV + dV.T - (2.0 / 3.0) * div * np.eye(3)
    zeta = X0 / np.linalg.norm(X0)
    return BubbleVectorResult(pts, vals, lie, pij_limit(pts - c, zeta, b.f_at_center))


# ---------------------------------------------------------------------------
# stability experiment


@dataclass
class StabilityRow:
    delta: float
    data_distance: float
    solution_distance: float
    outer_iters: int
    status: str


CSV_HEADER = ["delta", "data_distance", "solution_distance", "outer_iters", "status"]


def _potential_distance(V1, V0, psi_values) -> float:
    lo, hi = float(np.min(psi_values)), float(np.max(psi_values))
    s = np.linspace(lo - 1.0, hi + 1.0, 201)
    return float(np.abs(V1(s) - V0(s)).max() + np.abs(V1.derivative(s) - V0.derivative(s)).max())


def stability_experiment(config, deltas=None, cfg=None, workers: int = 1, grid=None):
    """Rows (sorted by delta, delta = 0 included) of the perturbation experiment.

    Every perturbed problem is warm-started from the base solution.  A row
    whose problem or solve fails is kept with status ``failed:<Error>``.
    """
    from .constraints import (CoupledConfig, SolutionPair, coupled_solve, fnorm, hypothesis_check, lie_h,
                              to_generalized)
    from .grid import OneFormField

    cfg = cfg or CoupledConfig(tol=config.tol, max_outer=config.max_outer, strategy=config.strategy)
    grid = grid or config.make_grid()
    grid, F0, V0 = config.build(grid)
    G0 = to_generalized(F0, V0)
    hyp = hypothesis_check(G0)
    if not hyp.ok:
        raise LichLabError(f"base problem fails the hypotheses: {hyp}")
    init = SolutionPair(ScalarField(grid, np.ones(grid.n)), OneFormField(grid, np.zeros((grid.n, 3))))
    base, _ = coupled_solve(G0, init, cfg)
    L0 = lie_h(base.W)
    deltas = sorted(set([0.0] + list(config.stability.get("deltas", []) if deltas is None else deltas)))

    def row(d):
        try:
            _, Fd, Vd = config.build(grid, delta=d)
            dd = fnorm(Fd - F0) + _potential_distance(Vd, V0, F0.psi.values)
            Gd = to_generalized(Fd, Vd)
            sol, rep = coupled_solve(Gd, base, cfg)
            sd = field_norm(sol.phi - base.phi, "C1") + field_norm(lie_h(sol.W) - L0, "C0")
            return StabilityRow(d, dd, sd, rep.iterations, "ok")
        except LichLabError as exc:
            return StabilityRow(d, float("nan"), float("nan"), 0, f"failed:{type(exc).__name__}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(row, deltas))
    else:
        rows = [row(d) for d in deltas]
    return sorted(rows, key=lambda r: r.delta)


def write_stability_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([repr(float(r.delta)), f"{r.data_distance:.12e}", f"{r.solution_distance:.12e}",
                        r.outer_iters, r.status])


def write_plot_csv(rows, path) -> None:
    """log10 delta vs log10 solution distance for the converged nonzero rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["log10_delta", "log10_solution_distance"])
        for r in rows:
            if r.status == "ok" and r.delta > 0 and r.solution_distance > 0:
                w.writerow([f"{np.log10(r.delta):.12e}", f"{np.log10(r.solution_distance):.12e}"])


def empirical_slope(rows) -> float:
    """Least-squares slope of solution distance against delta through the origin."""
    d = np.array([r.delta for r in rows if r.status == "ok" and r.delta > 0])
    s = np.array([r.solution_distance for r in rows if r.status == "ok" and r.delta > 0])
    return float(d @ s / (d @ d))
