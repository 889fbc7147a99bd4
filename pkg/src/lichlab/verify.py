"""Identity suites behind ``lichlab verify``.

Each suite returns CheckRow records.  Resolutions are fixed per suite so a
table is comparable across configs; the config only supplies the Green and
adjointness grid and the random seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import sympy as sym
from scipy.optimize import minimize_scalar

from .errors import UnknownSuite

SUITES = ("chart", "kernel", "green", "pohozaev", "adjoint", "bubble", "floor")


@dataclass(frozen=True)
class CheckRow:
    suite: str
    check: str
    value: float
    threshold: str
    passed: bool

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "passed", bool(self.passed))


def verify_suite_select(names) -> list:
    """Ordered plan of suite names; an empty selection means every suite."""
    names = list(names or [])
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise UnknownSuite(f"unknown suite(s) {bad}; choose from {list(SUITES)}")
    return [s for s in SUITES if not names or s in names]


def observed_orders(values, hs) -> list:
    """Pairwise orders log(e_k / e_k+1) / log(h_k / h_k+1)."""
    return [float(np.log(values[k] / values[k + 1]) / np.log(hs[k] / hs[k + 1])) for k in range(len(hs) - 1)]


def fitted_order(values, hs) -> float:
    """Least-squares slope of log(error) against log(h)."""
    return float(np.polyfit(np.log(hs), np.log(values), 1)[0])


def gaussian_test_form(points, a, c, s):
    """X = exp(-|y - c|^2 / 2s^2) a and its exact vector Laplacian."""
    d = points - c
    g = np.exp(-np.sum(d * d, axis=1) / (2 * s * s))
    X = g[:, None] * a
    lap = g * (np.sum(d * d, axis=1) / s**4 - 3 / s**2)
    hess = g[:, None, None] * (d[:, :, None] * d[:, None, :] / s**4 - np.eye(3) / s**2)
    return X, -a[None, :] * lap[:, None] - np.einsum("nij,j->ni", hess, a) / 3.0


def golden_floor(f: float, b: float) -> float:
    """Minimum of t -> f t^5 + b t^-7 by golden-section search in log t."""
    res = minimize_scalar(lambda s: f * np.exp(5 * s) + b * np.exp(-7 * s), bracket=(-5.0, 0.0, 5.0),
                          method="golden", tol=1e-12)
    return float(res.fun)


# ---------------------------------------------------------------------------
# suites


def suite_chart(ctx) -> list:
    from .chart import Y, chart_identity_residual
    from .grid import make_ball_grid

    y1, y2, y3, y4 = Y
    hs = (0.2, 0.1, 0.05)
    grids = [make_ball_grid(1.0, h) for h in hs]
    cases = [("scalar-laplacian", y1 * y2 + sym.exp(y3)),
             ("cko", [y2**2, y1 * y3, sym.sin(y4), y1]),
             ("vector-laplacian", [y2**2, y1 * y3, sym.sin(y4), y1])]
    rows = []
    for kind, expr in cases:
        r = [chart_identity_residual(kind, g, expr) for g in grids]
        p = fitted_order(r, hs)
        rows.append(CheckRow("chart", f"{kind} order", p, ">= 1.9", p >= 1.9))
    return rows


def kernel_residuals(hs=(0.2, 0.1), R: float = 2.0, radius: float = 0.8) -> list:
    """max |vecLap(H * Y) - Y| / max |Y| over the support of a smooth bump."""
    from .grid import OneFormField, make_ball_grid
    from .killing import kernel_convolve
    from .operators import apply_operator

    out = []
    for h in hs:
        g = make_ball_grid(R, h)
        x = g.points
        r2 = np.sum(x * x, axis=1)
        s = np.clip(1 - r2 / radius**2, 0, None) ** 4
        Y = OneFormField(g, np.stack([s, 0.5 * s * x[:, 1], -s], axis=1))
        res = apply_operator("vec-laplacian", kernel_convolve(Y)).values - Y.values
        sup = (r2 < radius**2) & g.interior_mask
        out.append(float(np.abs(res[sup]).max() / np.abs(Y.values).max()))
    return out


def suite_kernel(ctx) -> list:
    r = kernel_residuals()
    mono = all(a > b for a, b in zip(r, r[1:]))
    return [CheckRow("kernel", "residual decreases", float(mono), "1", mono),
            CheckRow("kernel", "final residual / max|Y|", r[-1], "<= 0.05", r[-1] <= 0.05)]


def green_reproduction_errors(assembler, x, i: int, rng, n_forms: int = 5) -> tuple:
    """Relative errors of int <G, vecLap X> against (X - pi X)_i(x) on Gaussian forms."""
    from .grid import OneFormField
    from .killing import green_apply, killing_project

    g = assembler.grid
    G = assembler.assemble(x, i)
    errs = []
    for _ in range(n_forms):
        a = rng.normal(size=3)
        c = rng.uniform(-0.3, 0.3, 3) * g.R
        s = rng.uniform(0.12, 0.2) * g.R
        X, L = gaussian_test_form(g.points, a, c, s)
        free = X - killing_project(assembler.basis, OneFormField(g, X)).values
        errs.append(abs(green_apply(G, L) - free[G.node, i]) / np.abs(free).max())
    return G, errs


def random_source(rng, R: float) -> np.ndarray:
    x = rng.normal(size=3)
    return x / np.linalg.norm(x) * 0.5 * R * rng.uniform(0.2, 1.0)


def suite_green(ctx) -> list:
    from .grid import inner, make_ball_grid
    from .killing import GreenAssembler, make_killing_basis

    R, h = ctx["R"], ctx["h"]
    rng = np.random.default_rng(ctx["seed"])
    A1 = GreenAssembler(make_killing_basis(make_ball_grid(R, h)))
    A2 = GreenAssembler(make_killing_basis(make_ball_grid(2 * R, 2 * h)))
    x = random_source(rng, R)
    worst, free, resc = 0.0, 0.0, 0.0
    for i in range(3):
        G, errs = green_reproduction_errors(A1, x, i, rng)
        worst = max(worst, max(errs))
        free = max(free, max(abs(inner(K, G.field)) for K in A1.basis.fields))
        G2 = A2.assemble(2 * G.x, i)
        half = 0.5 * G.field.values
        resc = max(resc, float(np.abs(G2.field.values - half).max() / np.abs(half).max()))
    return [CheckRow("green", "reproduction error", worst, "<= 0.1", worst <= 0.1),
            CheckRow("green", "Killing-freeness", free, "<= 1e-8", free <= 1e-8),
            CheckRow("green", "rescaling defect", resc, "<= 0.05", resc <= 0.05)]


def suite_pohozaev(ctx) -> list:
    from .analysis import pohozaev_residual
    from .grid import ScalarField, make_ball_grid
    from .lichnerowicz import Bubble, bubble_field

    hs = (0.1, 0.05)
    rows, bub = [], []
    for h in hs:
        g = make_ball_grid(1.2, h)
        c = pohozaev_residual(ScalarField(g, np.full(g.n, 1.3)), 0.8)
        lin = pohozaev_residual(ScalarField(g, g.points[:, 0].copy()), 0.8)
        rows.append(CheckRow("pohozaev", f"constant h={h}", c, "<= 1e-10", c <= 1e-10))
        rows.append(CheckRow("pohozaev", f"x1 h={h}", lin, "<= 1e-10", lin <= 1e-10))
        bub.append(pohozaev_residual(bubble_field(g, Bubble(0.5)), 0.8))
    p = observed_orders(bub, hs)[0]
    rows.append(CheckRow("pohozaev", "bubble order", p, ">= 1.9", p >= 1.9))
    return rows


def compact_bump_pair(grid, rng):
    """Two random smooth 1-forms supported well inside the ball."""
    out = []
    for _ in range(2):
        c = rng.uniform(-0.2, 0.2, 3) * grid.R
        rho = 0.5 * grid.R
        r2 = np.sum((grid.points - c) ** 2, axis=1)
        s = np.clip(1 - r2 / rho**2, 0, None) ** 4
        out.append(s[:, None] * rng.normal(size=3))
    return out


def suite_adjoint(ctx) -> list:
    from .grid import OneFormField, inner, make_ball_grid
    from .operators import adjointness_residual, apply_operator

    g = make_ball_grid(ctx["R"], ctx["h"])
    rng = np.random.default_rng(ctx["seed"])
    a, b = (OneFormField(g, v) for v in compact_bump_pair(g, rng))
    r = adjointness_residual(a, b)
    self_r = adjointness_residual(a, a)
    lhs = inner(apply_operator("vec-laplacian", a), a)
    tol = 10 * g.h
    return [CheckRow("adjoint", "random bumps", r, f"<= {tol:g}", r <= tol),
            CheckRow("adjoint", "W = Z", self_r, f"<= {tol:g}", self_r <= tol and lhs >= 0)]


def bubble_residuals(mu: float, hs=(0.2, 0.1, 0.05), f: float = 0.75) -> list:
    from .grid import make_ball_grid
    from .lichnerowicz import Bubble, bubble_field
    from .operators import apply_operator

    out = []
    for h in hs:
        g = make_ball_grid(1.0, h)
        B = bubble_field(g, Bubble(mu, f_at_center=f))
        res = apply_operator("laplacian", B).values - f * B.values**5
        out.append(float(np.abs(res[g.interior_mask]).max()))
    return out


def suite_bubble(ctx) -> list:
    from .lichnerowicz import Bubble, bubble_eval

    hs = (0.2, 0.1, 0.05)
    rows = []
    for mu in (1.0, 0.5):
        orders = observed_orders(bubble_residuals(mu, hs), hs)
        ok = all(abs(p - 2.0) <= 0.15 for p in orders)
        rows.append(CheckRow("bubble", f"mu={mu} orders", min(orders), "2 +- 0.15", ok))
        c = float(bubble_eval(Bubble(mu), np.zeros(3)))
        err = abs(c - np.sqrt(2.0 / mu))
        rows.append(CheckRow("bubble", f"mu={mu} B(center)", err, "<= 1e-14", err <= 1e-14))
    return rows


def suite_floor(ctx) -> list:
    from .lichnerowicz import pointwise_floor

    rng = np.random.default_rng(ctx["seed"])
    fb = rng.uniform(0.1, 10.0, (100, 2))
    err = max(abs(pointwise_floor(f, b) - golden_floor(f, b)) for f, b in fb)
    anchor = abs(pointwise_floor(1.0, 1.0) - 1.97228)
    return [CheckRow("floor", "oracle mismatch", err, "<= 1e-12", err <= 1e-12),
            CheckRow("floor", "f=b=1 anchor", anchor, "<= 1e-5", anchor <= 1e-5)]


RUNNERS = {"chart": suite_chart, "kernel": suite_kernel, "green": suite_green, "pohozaev": suite_pohozaev,
           "adjoint": suite_adjoint, "bubble": suite_bubble, "floor": suite_floor}


def run_suites(plan, R: float = 1.0, h: float = 0.1, seed: int = 0) -> list:
    ctx = {"R": R, "h": h, "seed": seed}
    rows = []
    for name in plan:
        rows.extend(RUNNERS[name](ctx))
    return rows
