"""Independent reference computations used to freeze expected values.

None of these call into lichlab; they use closed forms, mpmath/scipy
root finding, or 1-D quadrature.
"""
import math

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq


def golden_min(fn, lo, hi, tol=1e-15, max_iter=500):
    """Golden-section search for the minimum value of a unimodal fn on [lo, hi]."""
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * (abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = fn(d)
    return min(fc, fd)


def floor_oracle(f, b):
    """min_t f t^5 + b t^-7, searched in s = log t."""
    return golden_min(lambda s: f * math.exp(5 * s) + b * math.exp(-7 * s), -20.0, 20.0)


def canonical_constant_root(delta):
    """Root near 1 of (1 + delta)/4 c^5 + c^-7/2 - 3c/4 (canonical family, V = 1 + delta)."""
    g = lambda c: (1 + delta) / 4 * c**5 + 0.5 * c**-7 - 0.75 * c
    return brentq(g, 0.9, 1.1, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def _radial_integrals(r, mu, k):
    """Phi, Phi', Psi', Psi'' for Phi = int B^6/|x-y|, Psi = int B^6 |x-y| at |x| = r."""
    B6 = lambda s: 8 * mu**3 / (mu**2 + k * s * s) ** 3
    opts = dict(epsabs=0, epsrel=1e-13, limit=400)
    inner = lambda fn: quad(lambda s: 4 * np.pi * s * s * B6(s) * fn(s), 0, r, **opts)[0]
    outer = lambda fn: quad(lambda s: 4 * np.pi * s * s * B6(s) * fn(s), r, np.inf, **opts)[0]
    phi = inner(lambda s: 1 / r) + outer(lambda s: 1 / s)
    dphi = -inner(lambda s: 1.0) / r**2
    dpsi = inner(lambda s: 1 - s * s / (3 * r * r)) + outer(lambda s: 2 * r / (3 * s))
    ddpsi = inner(lambda s: 2 * s * s / (3 * r**3)) + outer(lambda s: 2 / (3 * s))
    return phi, dphi, dpsi, ddpsi


def bubble_vector_oracle(x, X0, mu, f0):
    """V(x) = X0^j int B^6(y) H_ij(x - y) dy for a bubble centred at 0, by radial reduction.

    H_ij(z) = (8 delta_ij / |z| - d_i d_j |z|) / (32 pi).
    """
    x = np.asarray(x, float)
    X0 = np.asarray(X0, float)
    r = np.linalg.norm(x)
    n = x / r
    phi, _, dpsi, ddpsi = _radial_integrals(r, mu, 4 * f0 / 3)
    hess = ddpsi * np.outer(n, n) + dpsi / r * (np.eye(3) - np.outer(n, n))
    return (8 * X0 * phi - hess @ X0) / (32 * np.pi)


def bubble_lie_oracle(x, X0, mu, f0, eps=1e-4):
    """L_xi V at x from fourth-order central differences of bubble_vector_oracle."""
    x = np.asarray(x, float)
    dV = np.zeros((3, 3))
    for l in range(3):
        e = np.zeros(3)
        e[l] = eps
        vals = [bubble_vector_oracle(x + s * e, X0, mu, f0) for s in (-2, -1, 1, 2)]
        dV[:, l] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * eps)
    return dV + dV.T - (2 / 3) * np.trace(dV) * np.eye(3)


def sphere_integral_b6(f0):
    """int_R3 B^6 = 2 pi^2 (3/(4 f0))^(3/2)."""
    return 2 * np.pi**2 * (3 / (4 * f0)) ** 1.5
