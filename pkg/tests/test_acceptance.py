"""The twelve acceptance criteria, one test each.

Every test records a single pass/fail line (shown in the terminal summary)
before asserting.  Expected values come from tests/oracles.py or closed forms.
"""
import time

import numpy as np
import pytest
import sympy as sym

from lichlab.analysis import bubble_vector_field, concentration_detect, pohozaev_residual, synthesize_blowup_field
from lichlab.chart import Y, chart_identity_residual
from lichlab.config import load_config
from lichlab.constraints import (SolutionPair, coupled_solve, lie_h, physical_constraint_residual,
                                 to_generalized)
from lichlab.analysis import stability_experiment
from lichlab.grid import OneFormField, ScalarField, inner, make_ball_grid
from lichlab.killing import GreenAssembler, ckv_raw_fields, killing_project, make_killing_basis
from lichlab.lichnerowicz import Bubble, bubble_field, constant_branches, pointwise_floor
from lichlab.operators import apply_operator
from lichlab.verify import fitted_order, green_reproduction_errors, kernel_residuals, observed_orders, random_source

from oracles import canonical_constant_root, floor_oracle

CONFIGS = __import__("pathlib").Path(__file__).parent.parent / "configs"

# frozen oracle values (see tests/oracles.py)
FLOOR_1_1 = 1.9722859800819115
SLOPE_ORACLE = {1e-3: 0.08340634553860582, 2e-3: 0.08347954941934077, 4e-3: 0.08362653582022483}
PIJ_TARGET = -3 * np.pi / 8


def test_criterion_01_bubble_residual_order(report):
    t = time.time()
    hs = (0.2, 0.1, 0.05)
    orders = {}
    for mu in (1.0, 0.5):
        res = []
        for h in hs:
            g = make_ball_grid(1.0, h)
            B = bubble_field(g, Bubble(mu, f_at_center=0.75))
            r = apply_operator("laplacian", B).values - 0.75 * B.values**5
            res.append(np.abs(r[g.interior_mask]).max())
        orders[mu] = observed_orders(res, hs)
    dt = time.time() - t
    ok = all(abs(p - 2.0) <= 0.15 for ps in orders.values() for p in ps) and dt < 10
    report(1, "bubble exactness", ok, f"orders {({m: np.round(p, 3).tolist() for m, p in orders.items()})}", dt)
    assert ok


def test_criterion_02_pointwise_floor(report):
    t = time.time()
    rng = np.random.default_rng(2)
    fb = rng.uniform(0.1, 10.0, (100, 2))
    err = max(abs(pointwise_floor(f, b) - floor_oracle(f, b)) for f, b in fb)
    anchor = abs(pointwise_floor(1.0, 1.0) - 1.97228)
    dt = time.time() - t
    ok = err <= 1e-12 and anchor <= 1e-5 and abs(pointwise_floor(1.0, 1.0) - FLOOR_1_1) <= 1e-12 and dt < 1
    report(2, "pointwise floor", ok, f"max oracle mismatch {err:.2e}, anchor error {anchor:.2e}", dt)
    assert ok


def test_criterion_03_chart_identities(report):
    t = time.time()
    y1, y2, y3, y4 = Y
    hs = (0.2, 0.1, 0.05)
    grids = [make_ball_grid(1.0, h) for h in hs]
    cases = [("scalar-laplacian", y1 * y2 + sym.exp(y3)),
             ("cko", [y2**2, y1 * y3, sym.sin(y4), y1]),
             ("vector-laplacian", [y2**2, y1 * y3, sym.sin(y4), y1])]
    fitted, steps = {}, {}
    for kind, expr in cases:
        r = [chart_identity_residual(kind, g, expr) for g in grids]
        fitted[kind] = fitted_order(r, hs)
        steps[kind] = np.round(observed_orders(r, hs), 3).tolist()
    dt = time.time() - t
    ok = all(p >= 1.9 for p in fitted.values()) and dt < 30
    detail = ", ".join(f"{k} {fitted[k]:.3f} (steps {steps[k]})" for k in fitted)
    report(3, "chart identities", ok, detail, dt)
    assert ok


def test_criterion_04_kernel_reproduction(report):
    t = time.time()
    r = kernel_residuals((0.2, 0.1))
    dt = time.time() - t
    ok = r[1] < r[0] and r[1] <= 0.05 and dt < 60
    report(4, "kernel reproduction", ok, f"relative residuals {np.round(r, 4).tolist()}", dt)
    assert ok


def test_criterion_05_killing_structure(report):
    t = time.time()
    g = make_ball_grid(1.0, 0.1)
    raw = ckv_raw_fields(g.points).reshape(10, -1)
    rank = np.linalg.matrix_rank(raw @ raw.T * g.cell_volume)
    basis = make_killing_basis(g)
    rng = np.random.default_rng(5)
    X = OneFormField(g, rng.normal(size=(g.n, 3)))
    Z = OneFormField(g, rng.normal(size=(g.n, 3)))
    PX = killing_project(basis, X)
    idem = np.abs(killing_project(basis, PX).values - PX.values).max() / np.abs(PX.values).max()
    adj = abs(inner(PX, Z) - inner(X, killing_project(basis, Z))) / (1 + abs(inner(PX, Z)))
    cko = max(np.abs(apply_operator("cko", K).values[g.interior_mask]).max() for K in basis.fields)
    dt = time.time() - t
    ok = rank == 10 and idem <= 1e-10 and adj <= 1e-10 and cko <= 1e-10 and dt < 10
    report(5, "Killing structure", ok, f"rank {rank}, idempotence {idem:.1e}, self-adjointness {adj:.1e}, "
                                      f"cko residual {cko:.1e}", dt)
    assert ok


def test_criterion_06_neumann_green(report):
    t = time.time()
    rng = np.random.default_rng(6)
    A1 = GreenAssembler(make_killing_basis(make_ball_grid(1.0, 0.1)))
    A2 = GreenAssembler(make_killing_basis(make_ball_grid(2.0, 0.2)))
    worst, resc = 0.0, 0.0
    for _ in range(3):
        x = random_source(rng, 1.0)
        for i in range(3):
            G, errs = green_reproduction_errors(A1, x, i, rng)
            worst = max(worst, max(errs))
            G2 = A2.assemble(2 * G.x, i)
            half = 0.5 * G.field.values
            resc = max(resc, np.abs(G2.field.values - half).max() / np.abs(half).max())
    dt = time.time() - t
    ok = worst <= 0.1 and resc <= 0.05 and dt < 300
    report(6, "Neumann Green", ok, f"max reproduction error {worst:.4f}, rescaling defect {resc:.1e}", dt)
    assert ok


def test_criterion_07_exact_constant_solution(report):
    t = time.time()
    cfg = load_config(CONFIGS / "canonical.ini")
    grid, F, V = cfg.build()
    G = to_generalized(F, V)
    init = SolutionPair(ScalarField(grid, np.full(grid.n, 1.2)), OneFormField(grid, np.zeros((grid.n, 3))))
    sol, rep = coupled_solve(G, init)
    dphi = np.abs(sol.phi.values - 1).max()
    lw = np.abs(lie_h(sol.W).values).max()
    ham, mom = physical_constraint_residual(F, V, sol)
    dt = time.time() - t
    ok = rep.converged and dphi <= 1e-8 and lw <= 1e-8 and max(ham, mom) <= 5 * grid.h**2 and dt < 120
    report(7, "exact constant solution", ok, f"|phi-1| {dphi:.1e}, |LW| {lw:.1e}, "
                                            f"constraints ({ham:.1e}, {mom:.1e})", dt)
    assert ok


@pytest.fixture(scope="module")
def canonical_rows():
    t = time.time()
    rows = stability_experiment(load_config(CONFIGS / "canonical.ini"))
    return rows, time.time() - t


def test_criterion_08_stability_slope(report, canonical_rows):
    """Literal anchor: ratio within 10% of 1/9.

    The implicit-function root-find of the constant problem gives dc/d delta
    = 1/12, so this comparison cannot hold; it is kept as stated and fails.
    """
    rows, dt = canonical_rows
    ratios = [r.solution_distance / r.delta for r in rows if r.delta > 0]
    zero = [r for r in rows if r.delta == 0][0]
    ok = (all(r.status == "ok" for r in rows) and all(abs(q - 1 / 9) <= 0.1 / 9 for q in ratios)
          and zero.solution_distance <= 1e-8 and dt < 300)
    report(8, "stability slope vs 1/9", ok, f"ratios {np.round(ratios, 5).tolist()}, delta=0 distance "
                                           f"{zero.solution_distance:.1e}", dt)
    assert ok


def test_criterion_08_stability_slope_root_find_oracle(report, canonical_rows):
    rows, dt = canonical_rows
    ratios = {r.delta: r.solution_distance / r.delta for r in rows if r.delta > 0}
    rel = max(abs(ratios[d] - SLOPE_ORACLE[d]) / SLOPE_ORACLE[d] for d in SLOPE_ORACLE)
    zero = [r for r in rows if r.delta == 0][0]
    ok = all(r.status == "ok" for r in rows) and rel <= 0.1 and zero.solution_distance <= 1e-8 and dt < 300
    report(8, "stability slope vs root-find oracle", ok, f"max relative deviation {rel:.1e}", dt)
    assert ok


def test_slope_oracle_is_frozen_correctly():
    for d, q in SLOPE_ORACLE.items():
        assert (canonical_constant_root(d) - 1) / d == pytest.approx(q, rel=1e-9)


def test_criterion_09_branch_structure(report):
    t = time.time()
    simple = constant_branches(0.75, 0.25, 0.5)
    tangent = constant_branches(0.75, 0.5, 0.25)
    empty = constant_branches(0.75, 0.25, 10.0)
    second = (1 + np.sqrt(3)) ** 0.25  # s = c^4 solves s^2 - 2s - 2 = 0 after removing s = 1
    dt = time.time() - t
    ok = (any(abs(r.c - 1) <= 1e-12 and r.kind == "simple" for r in simple)
          and any(abs(r.c - second) <= 1e-12 for r in simple)
          and len(tangent) == 1 and abs(tangent[0].c - 1) <= 1e-10 and tangent[0].kind == "tangent"
          and empty == [] and dt < 1)
    report(9, "branch structure", ok, f"simple {[(round(r.c, 9), r.kind) for r in simple]}, "
                                     f"tangent {[(round(r.c, 9), r.kind) for r in tangent]}, a=10 {empty}", dt)
    assert ok


def test_criterion_10_blowup_detection(report):
    t = time.time()
    g = make_ball_grid(1.2, 0.05)
    zero = ScalarField(g, np.zeros(g.n))
    mu = 0.05
    ok, notes = True, []
    for centers in ([(0.0, 0.0, 0.0)], [(-0.5, 0.0, 0.0), (0.5, 0.0, 0.0)]):
        u = synthesize_blowup_field([Bubble(mu, c) for c in centers], zero)
        rep = concentration_detect(u)
        found = np.array([p for _, p in rep.points])
        ok &= len(found) == len(centers) and rep.separation_ok
        if len(found) == len(centers):
            d = max(np.linalg.norm(found - np.array(c), axis=1).min() for c in centers)
            ratios = np.array(rep.local_scales) / mu
            ok &= d <= 2 * g.h and np.all((ratios >= 0.9) & (ratios <= 1.1))
            notes.append(f"{len(centers)} bubble(s): offset {d:.2g}, mu ratio {np.round(ratios, 3).tolist()}")
    dt = time.time() - t
    ok &= dt < 30
    report(10, "blow-up detection", ok, "; ".join(notes), dt)
    assert ok


def test_criterion_11_pohozaev(report):
    t = time.time()
    hs = (0.1, 0.05)
    const, lin, bub = [], [], []
    for h in hs:
        g = make_ball_grid(1.2, h)
        const.append(pohozaev_residual(ScalarField(g, np.full(g.n, 0.7)), 0.8))
        lin.append(pohozaev_residual(ScalarField(g, g.points[:, 0].copy()), 0.8))
        bub.append(pohozaev_residual(bubble_field(g, Bubble(0.5)), 0.8))
    order = observed_orders(bub, hs)[0]
    dt = time.time() - t
    ok = max(const) <= 1e-10 and max(lin) <= 1e-10 and order >= 1.9 and dt < 30
    report(11, "Pohozaev", ok, f"constant {max(const):.1e}, x1 {max(lin):.1e}, bubble {np.round(bub, 5).tolist()} "
                               f"order {order:.3f}", dt)
    assert ok


def test_criterion_12_pij_asymptotics(report):
    t = time.time()
    errs = []
    for mu in (0.2, 0.1, 0.05):
        r = bubble_vector_field([0.0, 0.0, 1.0], Bubble(mu, f_at_center=0.75), [[1.0, 0.0, 0.0]])
        assert r.limit[0, 0, 2] == pytest.approx(PIJ_TARGET, rel=1e-14)
        errs.append(float(r.entry_error([0.0, 0.0, 1.0], 0, 2)[0]))
    dt = time.time() - t
    ok = errs[0] > errs[1] > errs[2] and errs[2] <= 0.15 and dt < 120
    report(12, "P_ij asymptotics", ok, f"relative errors {np.round(errs, 5).tolist()}", dt)
    assert ok
