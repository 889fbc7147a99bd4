"""Problem-definition files (INI syntax).

    [grid]       R_trunc, h
    [pole]       P = p1, p2, p3, p4            (optional, default 0,0,0,1)
    [data]       tau, psi, pi: expression in x1 x2 x3 or a .elfg field file
                 U: 0, six expressions (components 11,12,13,22,23,33 separated
                    by ';'), or a .elfg field file
    [potential]  V, dV: expressions in s
    [solver]     strategy (auto|newton|monotone), tol, max_outer
    [stability]  deltas (comma list); tau, psi, pi, V, dV may be overridden
                 by expressions that also see ``delta``
    [green]      points (';'-separated triples), indices (1-based)
"""
from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .expr import Expression

KNOWN = {
    "grid": {"r_trunc", "r", "h"},
    "pole": {"p"},
    "data": {"tau", "psi", "pi", "u"},
    "potential": {"v", "dv"},
    "solver": {"strategy", "tol", "max_outer"},
    "stability": {"deltas", "tau", "psi", "pi", "v", "dv"},
    "green": {"points", "indices"},
}
REQUIRED = {"grid": ("h",), "data": ("tau", "psi", "pi"), "potential": ("v", "dv")}
CHART_VARS = ("x1", "x2", "x3")


def _positions(text: str) -> dict:
    """(section, key) -> (line, column of the value), both 1-based."""
    pos, section = {}, None
    for ln, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\s*\[([^\]]+)\]", raw)
        if m:
            section = m.group(1).strip().lower()
            pos[(section, None)] = (ln, raw.index("[") + 1)
            continue
        m = re.match(r"(\s*)([^=:\s]+)\s*[=:]\s*", raw)
        if m and section is not None:
            pos[(section, m.group(2).lower())] = (ln, m.end() + 1)
    return pos


@dataclass
class ProblemConfig:
    R: float
    h: float
    pole: tuple
    data: dict  # tau/psi/pi -> Expression | Path ; U -> None | list[Expression] | Path
    V: Expression
    dV: Expression
    strategy: str = "auto"
    tol: float = 1e-8
    max_outer: int = 50
    stability: dict = dc_field(default_factory=dict)
    green: dict = dc_field(default_factory=dict)
    canonical: dict = dc_field(default_factory=dict)
    path: Path | None = None

    @property
    def hash(self) -> str:
        blob = json.dumps(self.canonical, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- building ---------------------------------------------------------
    def make_grid(self):
        from .grid import make_ball_grid

        return make_ball_grid(self.R, self.h)

    def build(self, grid=None, delta: float | None = None):
        """Return (grid, PhysicsData, Potential); ``delta`` selects a stability member."""
        from .constraints import PhysicsData, Potential, zero_tensor
        from .grid import ScalarField, SymTensorField, read_field

        grid = grid or self.make_grid()
        extra = {} if delta is None else {"delta": delta}
        src = dict(self.data)
        V, dV = self.V, self.dV
        if delta is not None:
            for k in ("tau", "psi", "pi"):
                if k in self.stability:
                    src[k] = self.stability[k]
            V = self.stability.get("v", V)
            dV = self.stability.get("dv", dV)

        def scalar(item):
            if isinstance(item, Path):
                return read_field(self._resolve(item), grid)
            return ScalarField(grid, item.at_points(grid.points, **{k: v for k, v in extra.items() if k in item.names}))

        tau, psi, pi = scalar(src["tau"]), scalar(src["psi"]), scalar(src["pi"])
        U = src.get("u")
        if U is None:
            Ut = zero_tensor(grid)
        elif isinstance(U, Path):
            f = read_field(self._resolve(U), grid)
            Ut = SymTensorField(grid, f.values, traceless=True)
        else:
            comps = np.stack([e.at_points(grid.points) for e in U], axis=1)
            Ut = SymTensorField(grid, comps, traceless=True)

        def fn(e):
            return lambda s: np.broadcast_to(np.asarray(e(s=s, **{k: v for k, v in extra.items() if k in e.names})),
                                             np.shape(s))

        return grid, PhysicsData(tau, psi, pi, Ut), Potential(fn(V), fn(dV))

    def _resolve(self, p: Path) -> Path:
        if p.is_absolute() or self.path is None:
            return p
        return self.path.parent / p


def load_config(path) -> ProblemConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    cfg = parse_config(text)
    cfg.path = path
    return cfg


def parse_config(text: str) -> ProblemConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("content before the first [section]", exc.lineno, 1)
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno, 1)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno, 1)
    except configparser.ParsingError as exc:
        ln, _ = exc.errors[0]
        raise ConfigError("malformed line", ln, 1)
    pos = _positions(text)
    sections = {s.lower(): s for s in cp.sections()}

    def where(sec, key=None):
        return pos.get((sec, key), pos.get((sec, None), (1, 1)))

    for sec in sections:
        if sec not in KNOWN:
            raise ConfigError(f"unknown section [{sec}]", *where(sec))
        for key in cp[sections[sec]]:
            if key.lower() not in KNOWN[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", *where(sec, key.lower()))
    for sec, keys in REQUIRED.items():
        if sec not in sections:
            raise ConfigError(f"missing section [{sec}]", 1, 1)
        for k in keys:
            if k not in cp[sections[sec]]:
                raise ConfigError(f"missing key {k!r} in [{sec}]", *where(sec))

    def get(sec, key, default=None):
        if sec not in sections or key not in cp[sections[sec]]:
            return default
        return cp[sections[sec]][key].strip()

    def num(sec, key, default=None, kind=float):
        raw = get(sec, key)
        if raw is None:
            if default is None:
                raise ConfigError(f"missing key {key!r} in [{sec}]", *where(sec))
            return default
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}", *where(sec, key))

    def expr(sec, key, variables):
        raw = get(sec, key)
        ln, col = where(sec, key)
        return Expression(raw, variables, ln, col)

    def scalar_source(sec, key, variables):
        raw = get(sec, key)
        if raw.endswith(".elfg"):
            return Path(raw)
        return expr(sec, key, variables)

    h = num("grid", "h")
    R = num("grid", "r_trunc", default=None) if get("grid", "r_trunc") is not None else num("grid", "r")
    if not (h > 0 and R >= 4 * h):
        raise ConfigError(f"grid needs h > 0 and R_trunc >= 4h (got R={R}, h={h})", *where("grid", "h"))

    pole = (0.0, 0.0, 0.0, 1.0)
    if get("pole", "p") is not None:
        try:
            pole = tuple(float(t) for t in get("pole", "p").split(","))
        except ValueError:
            raise ConfigError("P must be four comma-separated numbers", *where("pole", "p"))
        if len(pole) != 4 or abs(np.linalg.norm(pole) - 1.0) > 1e-12:
            raise ConfigError("P must be a unit 4-vector", *where("pole", "p"))

    data = {k: scalar_source("data", k, CHART_VARS) for k in ("tau", "psi", "pi")}
    rawU = get("data", "u")
    if rawU is None or rawU in ("0", "0.0"):
        data["u"] = None
    elif rawU.endswith(".elfg"):
        data["u"] = Path(rawU)
    else:
        parts = [p.strip() for p in rawU.split(";")]
        ln, col = where("data", "u")
        if len(parts) != 6:
            raise ConfigError("U needs six ';'-separated component expressions", ln, col)
        data["u"] = [Expression(p, CHART_VARS, ln, col) for p in parts]

    V = expr("potential", "v", ("s",))
    dV = expr("potential", "dv", ("s",))

    strategy = get("solver", "strategy", "auto")
    if strategy not in ("auto", "newton", "monotone"):
        raise ConfigError(f"unknown strategy {strategy!r}", *where("solver", "strategy"))
    tol = num("solver", "tol", 1e-8)
    max_outer = num("solver", "max_outer", 50, int)

    stability = {}
    if "stability" in sections:
        raw = get("stability", "deltas", "")
        try:
            stability["deltas"] = [float(t) for t in raw.split(",") if t.strip()]
        except ValueError:
            raise ConfigError("deltas must be a comma-separated list of numbers", *where("stability", "deltas"))
        for k in ("tau", "psi", "pi"):
            if get("stability", k) is not None:
                stability[k] = expr("stability", k, CHART_VARS + ("delta",))
        for k in ("v", "dv"):
            if get("stability", k) is not None:
                stability[k] = expr("stability", k, ("s", "delta"))

    green = {}
    if "green" in sections:
        try:
            pts = [tuple(float(c) for c in t.split(",")) for t in get("green", "points", "").split(";") if t.strip()]
            idx = [int(t) for t in get("green", "indices", "1,2,3").split(",")]
        except ValueError:
            raise ConfigError("green points/indices malformed", *where("green"))
        if any(len(p) != 3 for p in pts) or any(i not in (1, 2, 3) for i in idx):
            raise ConfigError("green points need 3 coordinates and indices lie in 1..3", *where("green"))
        green = {"points": pts, "indices": idx}

    canonical = {sec: {k.lower(): re.sub(r"\s+", "", v) for k, v in cp[orig].items()}
                 for sec, orig in sections.items()}
    return ProblemConfig(R, h, pole, data, V, dV, strategy, tol, max_outer, stability, green, canonical)
