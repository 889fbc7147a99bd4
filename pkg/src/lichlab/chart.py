"""Stereographic charts of the unit 3-sphere and the conformal chart identities.

Sphere-side objects live in ambient coordinates ``y = (y1, y2, y3, y4)`` of
R^4.  A 1-form on the sphere is represented by an ambient vector field that
is tangent on the sphere; a symmetric 2-tensor by an ambient 4x4 field.
Closed-form sphere operators are built symbolically with sympy.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import sympy as sym

from .errors import PoleSingularity
from .grid import BallGrid, OneFormField, ScalarField, sample_field
from .operators import apply_operator

EPS_POLE = 1e-8


@dataclass(frozen=True, eq=False)
class ChartPole:
    """Pole P of the chart; the projection is taken from -P, so P maps to 0."""

    P: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float).reshape(4)
        if abs(np.linalg.norm(P) - 1.0) > 1e-12:
            raise ValueError(f"pole must be a unit 4-vector, |P| = {np.linalg.norm(P)}")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @cached_property
    def frame(self) -> np.ndarray:
        """4x3 orthonormal frame of the tangent space at P (columns E1, E2, E3).

        For P = e4 this is (e1, e2, e3); otherwise the Householder reflection
        exchanging e4 and P is applied to it.
        """
        e4 = np.array([0.0, 0.0, 0.0, 1.0])
        v = e4 - self.P
        if np.linalg.norm(v) < 1e-15:
            H = np.eye(4)
        else:
            H = np.eye(4) - 2.0 * np.outer(v, v) / (v @ v)
        return H[:, :3].copy()


NORTH = ChartPole(np.array([0.0, 0.0, 0.0, 1.0]))


def conf_factor(x) -> np.ndarray:
    """U(x) = sqrt(2 / (1 + |x|^2))."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(2.0 / (1.0 + np.sum(x * x, axis=-1)))


def conf_factor_grad(x) -> np.ndarray:
    """dU/dx_j = -x_j U^3 / 2."""
    x = np.asarray(x, dtype=float)
    return -0.5 * x * conf_factor(x)[..., None] ** 3


def stereo_map(pole: ChartPole, direction: str, point, eps_pole: float = EPS_POLE) -> np.ndarray:
    """Forward: S^3 minus {-P} -> R^3 (P -> 0).  Inverse: R^3 -> S^3."""
    pt = np.asarray(point, dtype=float)
    E, P = pole.frame, pole.P
    if direction == "forward":
        if pt.shape[-1] != 4:
            raise ValueError("forward map expects points of R^4")
        if np.any(np.linalg.norm(pt + P, axis=-1) < eps_pole):
            raise PoleSingularity("point within eps_pole of the projection pole -P")
        return (pt @ E) / (1.0 + pt @ P)[..., None]
    if direction == "inverse":
        if pt.shape[-1] != 3:
            raise ValueError("inverse map expects points of R^3")
        if not np.all(np.isfinite(pt)):
            raise ValueError("non-finite chart point")
        r2 = np.sum(pt * pt, axis=-1)[..., None]
        return (2.0 * pt @ E.T + (1.0 - r2) * P) / (1.0 + r2)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def inverse_jacobian(pole: ChartPole, x) -> np.ndarray:
    """d(pi_P^-1)/dx as an array (..., 4, 3)."""
    x = np.asarray(x, dtype=float)
    s = 1.0 + np.sum(x * x, axis=-1)
    eye = np.eye(3)
    dE = 2.0 * eye / s[..., None, None] - 4.0 * x[..., :, None] * x[..., None, :] / (s**2)[..., None, None]
    dP = -4.0 * x / (s**2)[..., None]
    return np.einsum("ak,...kj->...aj", pole.frame, dE) + pole.P[:, None] * dP[..., None, :]


def pull_back(pole: ChartPole, obj, grid: BallGrid, kind: str | None = None):
    """Pull a sphere object back to the chart grid.

    ``obj`` maps ambient points (n, 4) to a scalar (n,), an ambient 1-form
    (n, 4) or an ambient tensor (n, 4, 4).  1-forms become J^T w, tensors
    J^T T J, with J the Jacobian of the inverse projection.
    """
    y = stereo_map(pole, "inverse", grid.points)
    vals = np.asarray(obj(y), dtype=float)
    if vals.ndim == 0:
        vals = np.full(grid.n, float(vals))
    if kind is None:
        kind = {1: "scalar", 2: "1-form", 3: "tensor"}[vals.ndim]
    if kind == "scalar":
        return sample_field(grid, lambda _: vals)
    J = inverse_jacobian(pole, grid.points)
    if kind == "1-form":
        return sample_field(grid, lambda _: np.einsum("nak,na->nk", J, vals))
    if kind == "tensor":
        return sample_field(grid, lambda _: np.einsum("nak,nab,nbl->nkl", J, vals, J))
    raise ValueError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# symbolic sphere calculus

Y = sym.symbols("y1:5", real=True)
_yv = sym.Matrix(Y)
_PROJ = sym.eye(4) - _yv * _yv.T


def sphere_laplacian(F) -> sym.Expr:
    """Geometer's Laplace-Beltrami operator of the unit S^3 on any ambient extension F."""
    H = sym.hessian(F, Y)
    grad = sym.Matrix([sym.diff(F, v) for v in Y])
    return -((H.trace() - (_yv.T * H * _yv)[0]) - 3 * (_yv.T * grad)[0])


def _jac(w):
    return sym.Matrix(4, 4, lambda i, j: sym.diff(w[i], Y[j]))


def sphere_cko(w) -> sym.Matrix:
    """Conformal Killing operator of the round metric on a tangent ambient field w."""
    D = _jac(w)
    return _PROJ * (D + D.T) * _PROJ - sym.Rational(2, 3) * (_PROJ * D).trace() * _PROJ


def sphere_vec_laplacian(w) -> list:
    """-div of the conformal Killing operator, as a tangent ambient field."""
    S = sphere_cko(w)
    div = sym.Matrix(4, 1, lambda m, _: sum(_PROJ[k, i] * sym.diff(S[i, m], Y[k]) for k in range(4) for i in range(4)))
    return list(-(_PROJ * div))


def tangent(w) -> list:
    """Project an ambient expression-vector to the tangent space of the unit sphere."""
    return list(_PROJ * sym.Matrix(w))


def lambdify_ambient(expr):
    """Vectorized numeric evaluation (n, 4) -> (n,) / (n, 4) / (n, 4, 4)."""
    if isinstance(expr, (list, tuple)):
        fs = [sym.lambdify([Y], e, "numpy", cse=True) for e in expr]
        return lambda y: np.stack([np.broadcast_to(f(y.T), y.shape[:-1]) for f in fs], axis=-1)
    if isinstance(expr, sym.MatrixBase):
        fs = [[sym.lambdify([Y], expr[i, j], "numpy", cse=True) for j in range(expr.shape[1])] for i in range(expr.shape[0])]
        return lambda y: np.stack(
            [np.stack([np.broadcast_to(f(y.T), y.shape[:-1]) for f in row], axis=-1) for row in fs], axis=-2)
    f = sym.lambdify([Y], expr, "numpy", cse=True)
    return lambda y: np.broadcast_to(np.asarray(f(y.T), dtype=float), y.shape[:-1])


# ---------------------------------------------------------------------------
# sphere conformal Killing fields from chart parameters


def sphere_ckv(pole: ChartPole, lam, b, c, omega) -> callable:
    """Ambient tangent field Z on S^3 with chart representative U^4 L.

    L(x) = 2<b,x>x - |x|^2 b + lam x + c + Omega x is the flat conformal
    Killing field; Z(y) = A y + a - (a.y) y with A skew, so Z is tangent.
    """
    E, P = pole.frame, pole.P
    bt, ct = E @ np.asarray(b, float), E @ np.asarray(c, float)
    A = np.outer(ct + bt, P) - np.outer(P, ct + bt) + E @ np.asarray(omega, float) @ E.T
    a = (ct - bt) - lam * P

    def Z(y):
        y = np.asarray(y, float)
        return y @ A.T + a - (y @ a)[..., None] * y

    return Z


# ---------------------------------------------------------------------------
# identity residuals

_KINDS = ("scalar-laplacian", "cko", "vector-laplacian")


def chart_identity_residual(kind: str, grid: BallGrid, expr, pole: ChartPole = NORTH) -> float:
    """Max-norm residual over interior nodes of a chart transformation identity.

    scalar-laplacian:  Delta_xi(u[P] U) = U^5 (Delta_h u + 3u/4) o pi^-1
    cko:               U^4 L_xi(U^-4 W[P]) = pullback of L_h W
    vector-laplacian:  vecLap_xi(W^) - 6 U^-1 (L_xi W^)_ij d_j U = pullback of vecLap_h W,
                       with W^ = U^-4 W[P]

    ``expr`` is a sympy scalar in y1..y4 (scalar case) or a list of four
    sympy expressions for an ambient 1-form; it is made tangent first.  The
    left side is discrete, the right side is exact.
    """
    if kind not in _KINDS:
        raise ValueError(f"unknown identity {kind!r}; expected one of {_KINDS}")
    nodes = grid.interior_nodes
    U = conf_factor(grid.points)
    if kind == "scalar-laplacian":
        u = lambdify_ambient(expr)
        rhs = lambdify_ambient(sphere_laplacian(expr) + sym.Rational(3, 4) * expr)
        v = pull_back(pole, u, grid, "scalar")
        lhs = apply_operator("laplacian", ScalarField(grid, v.values * U)).values
        exact = U**5 * pull_back(pole, rhs, grid, "scalar").values
        return float(np.max(np.abs(lhs - exact)[nodes]))
    w = tangent(expr)
    Wp = pull_back(pole, lambdify_ambient(w), grid, "1-form")
    What = OneFormField(grid, Wp.values / U[:, None] ** 4)
    if kind == "cko":
        lhs = apply_operator("cko", What).matrices() * U[:, None, None] ** 4
        exact = pull_back(pole, lambdify_ambient(sphere_cko(w)), grid, "tensor").matrices()
        return float(np.max(np.abs(lhs - exact)[nodes]))
    LW = apply_operator("cko", What).matrices()
    dU = conf_factor_grad(grid.points)
    lhs = apply_operator("vec-laplacian", What).values - 6.0 * np.einsum("nij,nj->ni", LW, dU) / U[:, None]
    exact = pull_back(pole, lambdify_ambient(sphere_vec_laplacian(w)), grid, "1-form").values
    return float(np.max(np.abs(lhs - exact)[nodes]))
