"""Lattice grids restricted to a Euclidean ball, fields on them, discrete norms and dump formats."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvalidGrid, LichLabError, NonFiniteSample

# upper-triangular storage order of a symmetric 3x3 tensor
SYM_INDEX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
_SYM_POS = np.array([[0, 1, 2], [1, 3, 4], [2, 4, 5]])

AXES = np.eye(3, dtype=int)


class BallGrid:
    """Regular lattice ``h * Z^3`` intersected with the open ball ``|x| < R``.

    Nodes are ordered lexicographically by integer lattice index.  A node is
    *interior* when its six axis neighbours are nodes as well; every other node
    is a boundary node and carries the unit normal ``x / |x|``.
    """

    def __init__(self, R: float, h: float):
        if not (h > 0) or not np.isfinite(h) or not np.isfinite(R) or R < 4 * h:
            raise InvalidGrid(f"need R >= 4h > 0, got R={R}, h={h}")
        self.R = float(R)
        self.h = float(h)
        m = int(np.ceil(self.R / self.h)) + 1
        self._m = m
        rng = np.arange(-m, m + 1)
        I, J, K = np.meshgrid(rng, rng, rng, indexing="ij")
        idx = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=1)
        n2 = (idx**2).sum(axis=1)
        inside = n2 < (self.R / self.h) ** 2 - 1e-9
        self.index = idx[inside]  # already lexicographic
        self.index.setflags(write=False)
        self.points = self.h * self.index.astype(float)
        self.points.setflags(write=False)
        lookup = np.full((2 * m + 1,) * 3, -1, dtype=np.int64)
        lookup[tuple((self.index + m).T)] = np.arange(len(self.index))
        self._lookup = lookup
        axis_ok = np.ones(self.n, dtype=bool)
        for k in range(3):
            axis_ok &= self.neighbor(AXES[k]) >= 0
            axis_ok &= self.neighbor(-AXES[k]) >= 0
        self.interior_mask = axis_ok
        self.boundary_mask = ~axis_ok
        self.interior_mask.setflags(write=False)
        self.boundary_mask.setflags(write=False)
        bp = self.points[self.boundary_mask]
        self.boundary_normals = bp / np.linalg.norm(bp, axis=1)[:, None]
        self.boundary_normals.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.index)

    @property
    def cell_volume(self) -> float:
        return self.h**3

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    def neighbor(self, offset) -> np.ndarray:
        """Node number of ``node + offset`` (lattice units) for every node, -1 if absent."""
        off = np.asarray(offset, dtype=int)
        tgt = self.index + off + self._m
        ok = np.all((tgt >= 0) & (tgt <= 2 * self._m), axis=1)
        out = np.full(self.n, -1, dtype=np.int64)
        out[ok] = self._lookup[tuple(tgt[ok].T)]
        return out

    def locate(self, lattice_index):
        """Node number of an integer lattice index, -1 if it is not a node.

        An (m, 3) array of indices gives an (m,) array of node numbers.
        """
        t = np.asarray(lattice_index, dtype=int) + self._m
        if t.ndim == 2:
            ok = np.all((t >= 0) & (t <= 2 * self._m), axis=1)
            out = np.full(len(t), -1, dtype=np.int64)
            out[ok] = self._lookup[tuple(t[ok].T)]
            return out
        if np.any(t < 0) or np.any(t > 2 * self._m):
            return -1
        return int(self._lookup[tuple(t)])

    def nearest_node(self, x) -> int:
        k = np.rint(np.asarray(x, dtype=float) / self.h).astype(int)
        node = self.locate(k)
        if node < 0:
            node = int(np.argmin(np.linalg.norm(self.points - np.asarray(x, float), axis=1)))
        return node

    def same_as(self, other: "BallGrid") -> bool:
        return self is other or (self.R == other.R and self.h == other.h)

    def __repr__(self):
        return f"BallGrid(R={self.R}, h={self.h}, n={self.n})"


def make_ball_grid(R: float, h: float) -> BallGrid:
    return BallGrid(R, h)


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class _Field:
    grid: BallGrid
    values: np.ndarray
    arity = 1

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        shape = (self.grid.n,) if self.arity == 1 else (self.grid.n, self.arity)
        if v.shape != shape:
            raise ValueError(f"{type(self).__name__} expects values of shape {shape}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteSample(f"{type(self).__name__} has non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def with_values(self, values):
        return type(self)(self.grid, values)

    def __add__(self, other):
        self._check(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, c):
        return self.with_values(self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)

    def _check(self, other):
        if type(other) is not type(self) or not self.grid.same_as(other.grid):
            raise ValueError("fields live on different grids or have different arity")

    def pointwise_norm(self) -> np.ndarray:
        if self.arity == 1:
            return np.abs(self.values)
        return np.linalg.norm(self.values, axis=1)


@dataclass(frozen=True, eq=False)
class ScalarField(_Field):
    arity = 1


@dataclass(frozen=True, eq=False)
class OneFormField(_Field):
    arity = 3


@dataclass(frozen=True, eq=False)
class SymTensorField(_Field):
    """Symmetric 3x3 tensor per node, stored as (xx, xy, xz, yy, yz, zz)."""

    arity = 6
    traceless: bool = dc_field(default=False)

    def __post_init__(self):
        super().__post_init__()
        if self.traceless:
            tr = self.trace()
            mag = np.abs(self.values).max(axis=1)
            if np.any(np.abs(tr) > 1e-10 * np.maximum(mag, 1.0)):
                raise ValueError("tensor flagged traceless has a nonzero trace")

    @classmethod
    def from_matrices(cls, grid, mats, traceless=False):
        mats = np.asarray(mats, dtype=float)
        sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
        vals = np.stack([sym[:, i, j] for i, j in SYM_INDEX], axis=1)
        return cls(grid, vals, traceless=traceless)

    def with_values(self, values):
        return type(self)(self.grid, values, traceless=False)

    def matrices(self) -> np.ndarray:
        return self.values[:, _SYM_POS]

    def trace(self) -> np.ndarray:
        return self.values[:, 0] + self.values[:, 3] + self.values[:, 5]

    def pointwise_norm(self) -> np.ndarray:
        return np.sqrt(np.einsum("nij,nij->n", self.matrices(), self.matrices()))


_ARITY_TYPES = {1: ScalarField, 3: OneFormField, 6: SymTensorField}


def sample_field(grid: BallGrid, fn, *, traceless: bool = False):
    """Evaluate ``fn`` on the node coordinates (array of shape (n, 3)).

    The output shape decides the field type: (n,) scalar, (n, 3) one-form,
    (n, 3, 3) or (n, 6) symmetric tensor.  Constants broadcast.
    """
    with np.errstate(all="ignore"):
        out = np.asarray(fn(grid.points), dtype=float)
    if out.ndim == 0:
        out = np.full(grid.n, float(out))
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.isfinite(out.reshape(grid.n, -1)).all(axis=1))
        raise NonFiniteSample(f"non-finite sample at {len(bad)} node(s), e.g. x={grid.points[bad[0]]}")
    if out.shape == (grid.n,):
        return ScalarField(grid, out)
    if out.shape == (grid.n, 3):
        return OneFormField(grid, out)
    if out.shape == (grid.n, 3, 3):
        return SymTensorField.from_matrices(grid, out, traceless=traceless)
    if out.shape == (grid.n, 6):
        return SymTensorField(grid, out, traceless=traceless)
    raise ValueError(f"cannot interpret sample of shape {out.shape}")


def inner(a, b, weight=None) -> float:
    """Discrete L2 inner product, cell volume h^3, summed in node order."""
    if not a.grid.same_as(b.grid):
        raise ValueError("fields on different grids")
    va = a.values.reshape(a.grid.n, -1)
    vb = b.values.reshape(b.grid.n, -1)
    if isinstance(a, SymTensorField):
        va = a.matrices().reshape(a.grid.n, 9)
        vb = b.matrices().reshape(b.grid.n, 9)
    pw = np.einsum("nk,nk->n", va, vb)
    if weight is not None:
        pw = pw * np.asarray(weight)
    return float(np.sum(pw) * a.grid.cell_volume)


# ---------------------------------------------------------------------------
# discrete C^k norms


def _centered_gradient(grid: BallGrid, vals: np.ndarray):
    """Centered differences on nodes with both axis neighbours (= interior)."""
    nodes = grid.interior_nodes
    g = []
    for k in range(3):
        p = grid.neighbor(AXES[k])[nodes]
        m = grid.neighbor(-AXES[k])[nodes]
        g.append((vals[p] - vals[m]) / (2 * grid.h))
    return nodes, np.stack(g, axis=1)  # (m, 3, arity...)


def _hessian_nodes(grid: BallGrid) -> np.ndarray:
    ok = grid.interior_mask.copy()
    for i in range(3):
        for j in range(i + 1, 3):
            for si in (1, -1):
                for sj in (1, -1):
                    ok &= grid.neighbor(si * AXES[i] + sj * AXES[j]) >= 0
    return np.flatnonzero(ok)


def _centered_hessian(grid: BallGrid, vals: np.ndarray):
    nodes = _hessian_nodes(grid)
    h2 = grid.h**2
    entries = []
    for i in range(3):
        for j in range(i, 3):
            if i == j:
                p = grid.neighbor(AXES[i])[nodes]
                m = grid.neighbor(-AXES[i])[nodes]
                entries.append((vals[p] - 2 * vals[nodes] + vals[m]) / h2)
            else:
                pp = grid.neighbor(AXES[i] + AXES[j])[nodes]
                pm = grid.neighbor(AXES[i] - AXES[j])[nodes]
                mp = grid.neighbor(-AXES[i] + AXES[j])[nodes]
                mm = grid.neighbor(-AXES[i] - AXES[j])[nodes]
                entries.append((vals[pp] - vals[pm] - vals[mp] + vals[mm]) / (4 * h2))
    return nodes, np.stack(entries, axis=1)


def field_norm(f, order: str = "C0") -> float:
    """Discrete surrogate of the C^0 / C^1 / C^2 norm.

    C0 is the max pointwise magnitude; C1 adds the max magnitude of the
    centered-difference gradient; C2 further adds the largest absolute
    centered second difference (mixed entries use the four diagonal nodes).
    """
    order = order.upper()
    if order not in ("C0", "C1", "C2"):
        raise ValueError(f"unknown norm order {order!r}")
    grid = f.grid
    vals = f.matrices().reshape(grid.n, 9) if isinstance(f, SymTensorField) else f.values
    total = float(np.max(f.pointwise_norm())) if grid.n else 0.0
    if order in ("C1", "C2"):
        _, g = _centered_gradient(grid, vals)
        if g.size:
            total += float(np.max(np.sqrt(np.sum(g.reshape(len(g), -1) ** 2, axis=1))))
    if order == "C2":
        _, hs = _centered_hessian(grid, vals)
        if hs.size:
            total += float(np.max(np.abs(hs)))
    return total


def restrict(f, subgrid: BallGrid):
    """Restrict a field to a smaller ball grid sharing the same lattice spacing."""
    if subgrid.h != f.grid.h or subgrid.R > f.grid.R:
        raise ValueError("subgrid must share h and lie inside the parent grid")
    idx = f.grid.locate(subgrid.index)
    vals = f.values[idx]
    if isinstance(f, SymTensorField):
        return SymTensorField(subgrid, vals, traceless=f.traceless)
    return type(f)(subgrid, vals)


# ---------------------------------------------------------------------------
# dump formats

_MAGIC = b"ELFG"
_HEADER = struct.Struct("<4sIQBdd")


def write_field(path, f) -> None:
    """Little-endian binary dump: magic, version, count, arity, R, h, values."""
    grid = f.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, grid.n, f.arity, grid.R, grid.h))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_field(path, grid: BallGrid | None = None):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise LichLabError(f"{path}: truncated field file")
    magic, version, count, arity, R, h = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != 1:
        raise LichLabError(f"{path}: not an ELFG v1 field file")
    if arity not in _ARITY_TYPES:
        raise LichLabError(f"{path}: bad arity {arity}")
    if grid is None:
        grid = make_ball_grid(R, h)
    elif grid.R != R or grid.h != h:
        raise LichLabError(f"{path}: grid mismatch (R={R}, h={h})")
    if grid.n != count:
        raise LichLabError(f"{path}: node count {count} does not match grid ({grid.n})")
    vals = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if vals.size != count * arity:
        raise LichLabError(f"{path}: payload size mismatch")
    vals = vals.reshape(count) if arity == 1 else vals.reshape(count, arity)
    return _ARITY_TYPES[arity](grid, vals.copy())


def export_csv(path, f) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"] + [f"v{k}" for k in range(f.arity)])
        vals = f.values.reshape(f.grid.n, -1)
        for p, v in zip(f.grid.points, vals):
            w.writerow([repr(float(c)) for c in p] + [repr(float(c)) for c in v])
