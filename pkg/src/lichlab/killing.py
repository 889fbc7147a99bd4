"""Conformal Killing fields of R^3, Killing projections, the fundamental
solution of the vector Laplacian and Neumann Green 1-forms on balls."""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.signal import fftconvolve

from .errors import CoincidentPoints, DegenerateBasis, TooCloseToBoundary
from .grid import BallGrid, OneFormField, inner, write_field
from .operators import LinearSolverConfig, VectorNeumannSolver, grid_ops

GRAM_COND_LIMIT = 1e8
_SKEW_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class CKVParams:
    """L(x) = 2<b,x>x - |x|^2 b + lam x + c + Omega x."""

    lam: float = 0.0
    b: tuple = (0.0, 0.0, 0.0)
    c: tuple = (0.0, 0.0, 0.0)
    omega: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        if om.shape != (3, 3) or np.any(om + om.T != 0):
            raise ValueError("omega must be a skew 3x3 matrix")
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        object.__setattr__(self, "omega", tuple(tuple(float(v) for v in row) for row in om))
        object.__setattr__(self, "lam", float(self.lam))

    def to_vector(self) -> np.ndarray:
        om = np.asarray(self.omega)
        return np.array([self.lam, *self.b, *self.c, *(om[i, j] for i, j in _SKEW_PAIRS)])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        om = np.zeros((3, 3))
        for w, (i, j) in zip(v[7:10], _SKEW_PAIRS):
            om[i, j], om[j, i] = w, -w
        return cls(lam=v[0], b=v[1:4], c=v[4:7], omega=om)


def ckv_eval(p: CKVParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    b, c, om = np.asarray(p.b), np.asarray(p.c), np.asarray(p.omega)
    r2 = np.sum(x * x, axis=-1)[..., None]
    return 2.0 * (x @ b)[..., None] * x - r2 * b + p.lam * x + c + x @ om.T


def ckv_raw_fields(x) -> np.ndarray:
    """The ten unit-parameter fields at points x, shape (10, n, 3)."""
    return np.stack([ckv_eval(CKVParams.from_vector(e), x) for e in np.eye(10)])


def ckv_fit(x, values):
    """Least-squares CKV parameters for values (n, 3) at points x; returns (params, residual norm)."""
    raw = ckv_raw_fields(x)  # (10, n, 3)
    A = raw.reshape(10, -1).T
    coef, *_ = np.linalg.lstsq(A, np.asarray(values, float).ravel(), rcond=None)
    res = np.linalg.norm(A @ coef - np.asarray(values, float).ravel())
    return CKVParams.from_vector(coef), float(res)


@dataclass(frozen=True, eq=False)
class KillingBasis:
    grid: BallGrid
    R: float
    fields: tuple
    gram: np.ndarray
    coeffs: np.ndarray  # fields[j] = sum_k coeffs[k, j] * raw_k
    weight: np.ndarray | None = None

    def params(self, j: int) -> CKVParams:
        return CKVParams.from_vector(self.coeffs[:, j])

    def array(self) -> np.ndarray:
        return np.stack([f.values for f in self.fields])


def make_killing_basis(grid: BallGrid, R: float | None = None, weight=None) -> KillingBasis:
    """Orthonormal basis of the sampled conformal Killing fields.

    The inner product is the discrete L2 product h^3 sum, optionally with a
    positive nodal ``weight``.
    """
    R = grid.R if R is None else float(R)
    if abs(R - grid.R) > 1e-12 * max(1.0, R):
        raise ValueError("basis radius must equal the grid radius")
    raw = ckv_raw_fields(grid.points)
    w = np.ones(grid.n) if weight is None else np.asarray(weight, dtype=float)
    flat = raw.reshape(10, -1)
    ww = np.repeat(w, 3)
    G = (flat * ww) @ flat.T * grid.cell_volume
    ev = np.linalg.eigvalsh(G)
    cond = ev[-1] / ev[0] if ev[0] > 0 else np.inf
    if not np.isfinite(cond) or cond > GRAM_COND_LIMIT:
        raise DegenerateBasis(f"Killing Gram matrix condition {cond:.3g} exceeds {GRAM_COND_LIMIT:g}")
    Lc = np.linalg.cholesky(G)
    T = np.linalg.inv(Lc).T  # raw^T T orthonormal
    fields = tuple(OneFormField(grid, np.tensordot(T[:, j], raw, axes=1)) for j in range(10))
    arr = np.stack([f.values for f in fields]).reshape(10, -1)
    gram = (arr * ww) @ arr.T * grid.cell_volume
    return KillingBasis(grid, R, fields, gram, T, None if weight is None else w)


def killing_project(basis: KillingBasis, X: OneFormField) -> OneFormField:
    if not X.grid.same_as(basis.grid):
        raise ValueError("field and basis live on different grids")
    out = np.zeros_like(X.values)
    for K in basis.fields:
        out += inner(K, X, basis.weight) * K.values
    return OneFormField(X.grid, out)


# ---------------------------------------------------------------------------
# fundamental solution

_C = 1.0 / (32.0 * np.pi)


def kernel_matrix(z) -> np.ndarray:
    """H(z) = (1/32pi)(7 delta/|z| + z z^T/|z|^3), shape (..., 3, 3)."""
    z = np.asarray(z, dtype=float)
    r = np.linalg.norm(z, axis=-1)[..., None, None]
    return _C * (7.0 * np.eye(3) / r + z[..., :, None] * z[..., None, :] / r**3)


def kernel_gradient(z) -> np.ndarray:
    """d_k H_ij(z), shape (..., 3, 3, 3) indexed [i, j, k]."""
    z = np.asarray(z, dtype=float)
    r = np.linalg.norm(z, axis=-1)[..., None, None, None]
    d = np.eye(3)
    zi = z[..., :, None, None]
    zj = z[..., None, :, None]
    zk = z[..., None, None, :]
    return _C * (-7.0 * d[:, :, None] * zk / r**3 + (d[:, None, :] * zj + d[None, :, :] * zi) / r**3
                 - 3.0 * zi * zj * zk / r**5)


def kernel_eval(x, y) -> np.ndarray:
    z = np.asarray(x, float) - np.asarray(y, float)
    if np.linalg.norm(z) < 1e-14:
        raise CoincidentPoints("kernel evaluated at coincident points")
    return kernel_matrix(z)


def singular_cell_value(h: float) -> float:
    """Ball average of H_ii over a ball of volume h^3 (the off-diagonal average vanishes)."""
    rc = (3.0 / (4.0 * np.pi)) ** (1.0 / 3.0) * h
    return 11.0 * _C / rc


def kernel_convolve(Y: OneFormField) -> OneFormField:
    """W = H * Y by lattice midpoint quadrature (FFT), with the singular cell
    replaced by the ball average of the kernel."""
    g = Y.grid
    m = g._m
    N = 2 * m + 1
    off = np.arange(-(N - 1), N) * g.h
    Z = np.stack(np.meshgrid(off, off, off, indexing="ij"), axis=-1)
    Z[N - 1, N - 1, N - 1] = 1.0  # placeholder, overwritten below
    Hk = kernel_matrix(Z)
    Hk[N - 1, N - 1, N - 1] = singular_cell_value(g.h) * np.eye(3)
    Yc = np.zeros((3, N, N, N))
    sl = tuple((g.index + m).T)
    for j in range(3):
        Yc[j][sl] = Y.values[:, j]
    out = np.zeros((g.n, 3))
    for i in range(3):
        acc = np.zeros((N, N, N))
        for j in range(3):
            if not np.any(Yc[j]):
                continue
            full = fftconvolve(Yc[j], Hk[..., i, j], mode="full")
            acc += full[N - 1:2 * N - 1, N - 1:2 * N - 1, N - 1:2 * N - 1]
        out[:, i] = acc[sl] * g.cell_volume
    return OneFormField(g, out)


def kernel_column_field(grid: BallGrid, x, i: int, node: int | None = None) -> np.ndarray:
    """Values of y -> H_i(x - y) (the i-th column) at the nodes, singular node regularized."""
    z = np.asarray(x, float) - grid.points
    r = np.linalg.norm(z, axis=1)
    sing = r < 1e-14
    z[sing] = 1.0
    vals = kernel_matrix(z)[:, :, i]
    vals[sing] = 0.0
    vals[sing, i] = singular_cell_value(grid.h)
    return vals


# ---------------------------------------------------------------------------
# Neumann Green forms


@dataclass(frozen=True, eq=False)
class GreenForm:
    x: np.ndarray
    i: int
    R: float
    field: OneFormField
    killing_free: bool
    node: int = -1
    multipliers: np.ndarray = dc_field(default_factory=lambda: np.zeros(10))

    def export(self, path_stem) -> None:
        write_field(f"{path_stem}.elfg", self.field)
        with open(f"{path_stem}.json", "w") as fh:
            json.dump({"x": [float(v) for v in self.x], "i": int(self.i) + 1, "R": self.R,
                       "killing_free": bool(self.killing_free)}, fh, indent=2, sort_keys=True)


class GreenAssembler:
    """Reuses one factorized Neumann solver for many (x, i) assemblies on a grid."""

    def __init__(self, basis: KillingBasis, cfg: LinearSolverConfig | None = None):
        self.basis = basis
        self.grid = basis.grid
        self.cfg = cfg or LinearSolverConfig()
        # the traction data come from a singular kernel, so multiplier shares are only
        # reported here; the Green construction is compatible in the continuum
        self.solver = VectorNeumannSolver(self.grid, basis, self.cfg)

    def assemble(self, x, i: int) -> GreenForm:
        g = self.grid
        x = np.asarray(x, dtype=float)
        if g.R - np.linalg.norm(x) < 4 * g.h:
            raise TooCloseToBoundary(f"source point {x} closer than 4h to the boundary")
        node = g.nearest_node(x)
        if not g.interior_mask[node]:
            raise TooCloseToBoundary(f"source point {x} does not snap to an interior node")
        xs = g.points[node]
        K = self.basis.array()
        rhs = -np.tensordot(K[:, node, i], K, axes=1)
        bn = g.boundary_nodes
        dH = kernel_gradient(xs - g.points[bn])  # d/dz of H(z), z = x - y
        # as a function of y, d/dy_k H_li(x - y) = -dH[l, i, k]
        dW = -dH[:, :, i, :]  # [node, l, k] = d_k (H_i)_l
        div = np.trace(dW, axis1=1, axis2=2)
        LH = dW + np.swapaxes(dW, 1, 2) - (2.0 / 3.0) * div[:, None, None] * np.eye(3)
        G_trac = -np.einsum("nk,nkl->nl", g.boundary_normals, LH)
        Ui = self.solver.solve(rhs, G_trac, check_compat=False)
        Hcol = OneFormField(g, kernel_column_field(g, xs, i))
        proj = np.zeros_like(Hcol.values)
        for Kf in self.basis.fields:
            proj += inner(Kf, Hcol) * Kf.values
        field = OneFormField(g, Hcol.values + Ui.values - proj)
        return GreenForm(xs, i, g.R, field, True, node, self.solver.last_multipliers.copy())


def neumann_green_assemble(basis: KillingBasis, x, i: int, cfg: LinearSolverConfig | None = None) -> GreenForm:
    """G_{i,R}(x, .) = H_i(x - .) + U_{i,x} - pi_R(H_i(x - .)); x is snapped to the nearest node."""
    return GreenAssembler(basis, cfg).assemble(x, i)


def green_apply(green: GreenForm, Y: np.ndarray) -> float:
    """Discrete integral of <G(x, y), Y(y)> dy (h^3 weighted node sum)."""
    return float(np.sum(green.field.values * Y) * green.field.grid.cell_volume)


@dataclass(frozen=True)
class GreenBoundReport:
    value_bound: float  # max |x-y| |G|
    gradient_bound: float  # max |x-y|^2 |grad G|
    near_ratio: float  # |G| / |H| at the nearest lattice neighbours of x
    samples: int


def green_verify(green: GreenForm, delta: float, n_samples: int = 200, seed: int = 0) -> GreenBoundReport:
    """Monitor |x-y||G| and |x-y|^2|grad G| over sampled y with |y| <= R - delta."""
    g = green.field.grid
    rng = np.random.default_rng(seed)
    ops = grid_ops(g)
    grads = np.stack([ops.D[k] @ green.field.values for k in range(3)], axis=-1)
    d = np.linalg.norm(g.points - green.x, axis=1)
    cand = np.flatnonzero((g.radii <= g.R - delta) & (d > 0.5 * g.h) & g.interior_mask)
    pick = rng.choice(cand, size=min(n_samples, len(cand)), replace=False)
    vb = float(np.max(d[pick] * np.linalg.norm(green.field.values[pick], axis=1)))
    # centered gradients next to the singular node are meaningless; use |x-y| >= 2h there
    gp = pick[d[pick] >= 2 * g.h - 1e-12]
    gb = float(np.max(d[gp] ** 2 * np.linalg.norm(grads[gp].reshape(len(gp), -1), axis=1))) if len(gp) else 0.0
    near = np.flatnonzero(np.abs(d - g.h) < 1e-9)
    Hn = kernel_matrix(green.x - g.points[near])[:, :, green.i]
    ratio = float(np.mean(np.linalg.norm(green.field.values[near], axis=1) / np.linalg.norm(Hn, axis=1)))
    return GreenBoundReport(vb, gb, ratio, len(pick))


def green_symmetry_defect(assembler: GreenAssembler, x, i: int, sample_points) -> tuple[float, float]:
    """Check that y -> (G_j(y, x)_i)_j - G_i(x, y) is a conformal Killing field.

    Returns (relative least-squares misfit, relative size of the difference).
    A misfit near zero means the two sides differ by an element of the Killing space.
    """
    g = assembler.grid
    Gx = assembler.assemble(x, i)
    ys, diffs = [], []
    for y in sample_points:
        ny = g.nearest_node(y)
        row = np.array([assembler.assemble(g.points[ny], j).field.values[Gx.node, i] for j in range(3)])
        ys.append(g.points[ny])
        diffs.append(row - Gx.field.values[ny])
    ys, diffs = np.array(ys), np.array(diffs)
    _, res = ckv_fit(ys, diffs)
    scale = max(np.linalg.norm(diffs), 1e-300)
    return res / scale, float(np.linalg.norm(diffs) / np.linalg.norm(Gx.field.values[[g.nearest_node(y) for y in sample_points]]))
