"""Command-line entry point: ``lichlab {solve,stability,verify,green,detect}``.

Exit status: 0 when every requested check passes, 1 on solver failure or a
failed check, 2 on a config or usage error (nothing is written then).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .errors import ConfigError, LichLabError, UnknownSuite

COMMANDS = ("solve", "stability", "verify", "green", "detect")


@dataclass
class RunManifest:
    command: str
    config_hash: str | None
    grid: dict | None
    seed: int
    started: str
    finished: str = ""
    artifacts: list = dc_field(default_factory=list)
    partial: bool = False
    status: str = "ok"
    tool_version: str = __version__

    def write(self, out: Path) -> None:
        self.finished = _now()
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _workers(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("LICH_LAB_WORKERS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"LICH_LAB_WORKERS must be an integer, got {env!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lichlab", description="Conformal constraint solver laboratory.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="problem definition (INI)")
    p.add_argument("--out", type=Path, default=Path("lichlab-out"), help="output directory")
    p.add_argument("--workers", type=int, default=None, help="worker pool size (env LICH_LAB_WORKERS)")
    p.add_argument("--suite", action="append", default=[], help="verify suite; repeatable, default all")
    p.add_argument("--seed", type=int, default=0, help="random seed (unsigned 64-bit)")
    p.add_argument("--field", type=Path, help="field file for detect")
    p.add_argument("--threshold", type=float, default=0.5, help="detect gradient threshold")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg, args, man: RunManifest) -> int:
    from .constraints import (CoupledConfig, SolutionPair, coupled_solve, equation_residuals, hypothesis_check,
                              physical_constraint_residual, to_generalized)
    from .grid import OneFormField, ScalarField, write_field

    grid, F, V = cfg.build()
    G = to_generalized(F, V)
    hyp = hypothesis_check(G)
    init = SolutionPair(ScalarField(grid, np.ones(grid.n)), OneFormField(grid, np.zeros((grid.n, 3))))
    sol, rep = coupled_solve(G, init, CoupledConfig(tol=cfg.tol, max_outer=cfg.max_outer, strategy=cfg.strategy))
    out = args.out
    write_field(out / "phi.elfg", sol.phi)
    write_field(out / "W.elfg", sol.W)
    rs, rv = equation_residuals(G, sol)
    ham, mom = physical_constraint_residual(F, V, sol)
    report = json.loads(rep.to_json())
    report.update({"hypotheses": {"coercive": hyp.coercive, "lambda_min": hyp.lambda_min,
                                  "f_positive": hyp.f_positive, "b_nonzero": hyp.b_nonzero},
                   "scalar_residual": rs, "vector_residual_mod_killing": rv,
                   "hamiltonian_residual": ham, "momentum_residual": mom,
                   "phi_min": float(sol.phi.values.min()), "phi_max": float(sol.phi.values.max())})
    (out / "solve_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    man.artifacts += ["phi.elfg", "W.elfg", "solve_report.json"]
    return 0 if rep.converged else 1


def cmd_stability(cfg, args, man: RunManifest) -> int:
    from .analysis import empirical_slope, stability_experiment, write_plot_csv, write_stability_csv

    rows = stability_experiment(cfg, workers=_workers(args.workers))
    write_stability_csv(rows, args.out / "stability.csv")
    write_plot_csv(rows, args.out / "stability_plot.csv")
    man.artifacts += ["stability.csv", "stability_plot.csv"]
    failed = [r for r in rows if r.status != "ok"]
    if any(r.delta > 0 for r in rows if r.status == "ok"):
        print(f"empirical slope {empirical_slope(rows):.6g}")
    if failed:
        man.partial = True
    return 1 if failed else 0


def cmd_verify(cfg, args, man: RunManifest) -> int:
    from .verify import run_suites, verify_suite_select

    plan = verify_suite_select(args.suite)
    R, h = (cfg.R, cfg.h) if cfg is not None else (1.0, 0.1)
    rows = run_suites(plan, R, h, args.seed)
    with open(args.out / "verify.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["suite", "check", "value", "threshold", "passed"])
        for r in rows:
            w.writerow([r.suite, r.check, f"{float(r.value):.12e}", r.threshold, "pass" if r.passed else "FAIL"])
    for r in rows:
        print(f"{'pass' if r.passed else 'FAIL'}  {r.suite:9s} {r.check:28s} {float(r.value):.4g}  ({r.threshold})")
    man.artifacts.append("verify.csv")
    return 0 if all(r.passed for r in rows) else 1


def cmd_green(cfg, args, man: RunManifest) -> int:
    from .grid import inner
    from .killing import GreenAssembler, green_verify, make_killing_basis

    targets = cfg.green or {"points": [(0.0, 0.0, 0.0)], "indices": [1, 2, 3]}
    asm = GreenAssembler(make_killing_basis(cfg.make_grid()))
    reports, ok = [], True
    for k, x in enumerate(targets["points"]):
        for i in targets["indices"]:
            G = asm.assemble(x, i - 1)
            stem = f"green_p{k}_i{i}"
            G.export(args.out / stem)
            rep = green_verify(G, 0.25 * cfg.R, seed=args.seed)
            free = max(abs(inner(K, G.field)) for K in asm.basis.fields)
            ok &= free <= 1e-8 and np.isfinite(rep.value_bound)
            reports.append({"point": [float(c) for c in G.x], "index": i, "killing_defect": free, **asdict(rep)})
            man.artifacts += [f"{stem}.elfg", f"{stem}.json"]
    (args.out / "green_report.json").write_text(json.dumps(reports, indent=2) + "\n")
    man.artifacts.append("green_report.json")
    return 0 if ok else 1


def cmd_detect(cfg, args, man: RunManifest) -> int:
    from .analysis import concentration_detect
    from .grid import ScalarField, read_field

    u = read_field(args.field)
    if not isinstance(u, ScalarField):
        raise ConfigError(f"{args.field}: detect needs a scalar field")
    rep = concentration_detect(u, threshold=args.threshold)
    (args.out / "detect_report.json").write_text(rep.to_json() + "\n")
    man.artifacts.append("detect_report.json")
    print(f"{len(rep.points)} concentration point(s), separation_ok={rep.separation_ok}")
    return 0 if rep.separation_ok else 1


HANDLERS = {"solve": cmd_solve, "stability": cmd_stability, "verify": cmd_verify, "green": cmd_green,
            "detect": cmd_detect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "detect":
            if args.field is None:
                raise ConfigError("detect needs --field")
            if not args.field.exists():
                raise ConfigError(f"field file {args.field} not found")
        elif args.config is None and args.command != "verify":
            raise ConfigError(f"{args.command} needs --config")
        cfg = load_config(args.config) if args.config is not None else None
        if args.command == "verify":
            from .verify import verify_suite_select

            verify_suite_select(args.suite)
        _workers(args.workers)
    except (ConfigError, UnknownSuite) as exc:
        print(f"lichlab: error: {exc}", file=sys.stderr)
        return 2
    if not 0 <= args.seed < 2**64:
        print("lichlab: error: --seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return 2

    args.out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(args.command, None if cfg is None else cfg.hash,
                      None if cfg is None else {"R": cfg.R, "h": cfg.h}, args.seed, _now())
    try:
        code = HANDLERS[args.command](cfg, args, man)
    except ConfigError as exc:
        print(f"lichlab: error: {exc}", file=sys.stderr)
        man.status, man.partial, code = f"failed:{type(exc).__name__}", bool(man.artifacts), 2
    except LichLabError as exc:
        print(f"lichlab: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        man.status, man.partial, code = f"failed:{type(exc).__name__}", bool(man.artifacts), 1
    else:
        if code != 0:
            man.status = "checks failed"
    man.write(args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
