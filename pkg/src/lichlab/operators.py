"""Discrete Euclidean operators on ball grids and linear boundary-value solvers.

All operators are assembled once per grid as sparse matrices.  Sign convention:
the scalar Laplacian is the geometer's ``-div grad`` (nonnegative spectrum).

Stencils.  At interior nodes first derivatives are centered, pure second
derivatives use the compact 3-point rule and mixed ones the 4 diagonal
nodes.  Wherever a centered stencil is missing, derivatives come from a
weighted least-squares quadratic fit over the lattice neighbourhood
``{-2..2}^3``.  Every stencil is therefore exact on quadratic polynomials,
which puts sampled conformal Killing fields exactly in the discrete kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import (
    IncompatibleData,
    SingularOperator,
    SolverDiverged,
    StencilOutOfDomain,
)
from .grid import AXES, SYM_INDEX, BallGrid, OneFormField, ScalarField, SymTensorField, _hessian_nodes

_FIT_OFFSETS = np.array([(i, j, k) for i in range(-2, 3) for j in range(-2, 3) for k in range(-2, 3)])
_FIT_NEAR = np.abs(_FIT_OFFSETS).max(axis=1) <= 1


def _quad_design(off):
    o = off.astype(float)
    x, y, z = o[:, 0], o[:, 1], o[:, 2]
    return np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z], axis=1)


# coefficient position of d/dx_k and d2/dx_k dx_l (with the factor already applied)
_FIRST_POS = (1, 2, 3)
_SECOND_POS = {(0, 0): (4, 2.0), (1, 1): (5, 2.0), (2, 2): (6, 2.0),
               (0, 1): (7, 1.0), (0, 2): (8, 1.0), (1, 2): (9, 1.0)}


class GridOps:
    """Sparse derivative matrices for one grid."""

    def __init__(self, grid: BallGrid):
        self.grid = grid
        n = grid.n
        self._nbr = {}
        self._fit_cache = {}
        h = grid.h
        self.D = []
        for k in range(3):
            p, m = self.nbr(AXES[k]), self.nbr(-AXES[k])
            # boundary nodes take all first derivatives from one quadratic fit so traction sees the node itself
            central = (p >= 0) & (m >= 0)
            rows, cols, vals = [], [], []
            c = np.flatnonzero(central)
            rows += [c, c]
            cols += [p[c], m[c]]
            vals += [np.full(len(c), 0.5 / h), np.full(len(c), -0.5 / h)]
            r, cc, vv = self._fit_rows(np.flatnonzero(~central), ("d", k))
            rows.append(r), cols.append(cc), vals.append(vv)
            self.D.append(self._csr(rows, cols, vals, n))
        self.hessian_support = np.zeros(n, dtype=bool)
        self.hessian_support[_hessian_nodes(grid)] = True
        self.D2 = {}
        for (k, l) in _SECOND_POS:
            rows, cols, vals = [], [], []
            if k == l:
                p, m = self.nbr(AXES[k]), self.nbr(-AXES[k])
                ok = (p >= 0) & (m >= 0)
                c = np.flatnonzero(ok)
                rows += [c, c, c]
                cols += [p[c], c, m[c]]
                vals += [np.full(len(c), 1 / h**2), np.full(len(c), -2 / h**2), np.full(len(c), 1 / h**2)]
            else:
                corners = [(AXES[k] + AXES[l], 1.0), (AXES[k] - AXES[l], -1.0),
                           (-AXES[k] + AXES[l], -1.0), (-AXES[k] - AXES[l], 1.0)]
                idx = [self.nbr(o) for o, _ in corners]
                ok = np.all(np.stack(idx) >= 0, axis=0)
                c = np.flatnonzero(ok)
                for (o, s), ii in zip(corners, idx):
                    rows.append(c)
                    cols.append(ii[c])
                    vals.append(np.full(len(c), s / (4 * h**2)))
                # one diagonal pair plus the axis nodes still gives a symmetric O(h^2) rule
                axis = [self.nbr(AXES[k]), self.nbr(-AXES[k]), self.nbr(AXES[l]), self.nbr(-AXES[l])]
                axis_ok = np.all(np.stack(axis) >= 0, axis=0)
                for pair, s in (((0, 3), 1.0), ((1, 2), -1.0)):
                    use = ~ok & axis_ok & (idx[pair[0]] >= 0) & (idx[pair[1]] >= 0)
                    c = np.flatnonzero(use)
                    for ii, wgt in ((idx[pair[0]], s), (idx[pair[1]], s), (axis[0], -s), (axis[1], -s),
                                    (axis[2], -s), (axis[3], -s), (np.arange(n), 2 * s)):
                        rows.append(c)
                        cols.append(ii[c])
                        vals.append(np.full(len(c), wgt / (2 * h**2)))
                    ok = ok | use
            r, cc, vv = self._fit_rows(np.flatnonzero(~ok), ("dd", k, l))
            rows.append(r), cols.append(cc), vals.append(vv)
            self.D2[(k, l)] = self.D2[(l, k)] = self._csr(rows, cols, vals, n)

    def nbr(self, offset):
        key = tuple(int(v) for v in offset)
        if key not in self._nbr:
            self._nbr[key] = self.grid.neighbor(key)
        return self._nbr[key]

    @staticmethod
    def _csr(rows, cols, vals, n):
        r = np.concatenate(rows) if rows else np.zeros(0, int)
        c = np.concatenate(cols) if cols else np.zeros(0, int)
        v = np.concatenate(vals) if vals else np.zeros(0)
        return sp.csr_matrix((v, (r, c)), shape=(n, n))

    def _fit(self, node):
        if node in self._fit_cache:
            return self._fit_cache[node]
        g = self.grid
        if not hasattr(self, "_fit_table"):
            self._fit_table = np.stack([self.nbr(o) for o in _FIT_OFFSETS], axis=1)
        row = self._fit_table[node]
        # prefer the 3x3x3 neighbourhood (less fill), widen to 5x5x5 if it is rank deficient
        for mask in (_FIT_NEAR, np.ones(len(_FIT_OFFSETS), dtype=bool)):
            ok = (row >= 0) & mask
            nodes, offs = row[ok], _FIT_OFFSETS[ok]
            A = _quad_design(offs)
            w = 1.0 / (1.0 + (offs**2).sum(axis=1))
            Aw = A * w[:, None]
            if len(offs) >= 10 and np.linalg.matrix_rank(Aw, tol=1e-8) == 10:
                break
        else:
            raise StencilOutOfDomain(f"node {node} at {g.points[node]} has no quadratic stencil")
        pinv = np.linalg.pinv(Aw) * w[None, :]  # coef = pinv @ values
        out = (nodes, pinv)
        self._fit_cache[node] = out
        return out

    def _fit_rows(self, nodes, what):
        h = self.grid.h
        rows, cols, vals = [], [], []
        for node in nodes:
            idx, pinv = self._fit(int(node))
            if what[0] == "d":
                coef = pinv[_FIRST_POS[what[1]]] / h
            else:
                pos, fac = _SECOND_POS[(min(what[1:]), max(what[1:]))]
                coef = fac * pinv[pos] / h**2
            rows.append(np.full(len(idx), node))
            cols.append(idx)
            vals.append(coef)
        if not rows:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    # assembled operators --------------------------------------------------
    def laplacian(self):
        return -(self.D2[(0, 0)] + self.D2[(1, 1)] + self.D2[(2, 2)])

    def gradient(self):
        return sp.vstack(self.D).tocsr()

    def cko(self):
        """(6n x 3n): W (component-major) -> sym tensor (component-major, SYM_INDEX order)."""
        n = self.grid.n
        blocks = []
        for i, j in SYM_INDEX:
            row = [None, None, None]
            for m in range(3):
                term = sp.csr_matrix((n, n))
                if m == i:
                    term = term + self.D[j]
                if m == j:
                    term = term + self.D[i]
                if i == j:
                    term = term - (2.0 / 3.0) * self.D[m]
                row[m] = term
            blocks.append(row)
        return sp.bmat(blocks, format="csr")

    def vec_laplacian(self):
        """(3n x 3n): -Delta_rough W_i - (1/3) d_i div W."""
        rough = self.D2[(0, 0)] + self.D2[(1, 1)] + self.D2[(2, 2)]
        blocks = [[None] * 3 for _ in range(3)]
        for i in range(3):
            for m in range(3):
                term = -(1.0 / 3.0) * self.D2[(i, m)]
                if i == m:
                    term = term - rough
                blocks[i][m] = term
        return sp.bmat(blocks, format="csr")

    def tensor_div(self):
        """(3n x 6n): (div T)_i = sum_j d_j T_ij."""
        n = self.grid.n
        pos = {(i, j): s for s, (i, j) in enumerate(SYM_INDEX)}
        blocks = [[None] * 6 for _ in range(3)]
        for i in range(3):
            for s in range(6):
                blocks[i][s] = sp.csr_matrix((n, n))
            for j in range(3):
                s = pos[(min(i, j), max(i, j))]
                blocks[i][s] = blocks[i][s] + self.D[j]
        return sp.bmat(blocks, format="csr")

    def traction(self, nodes=None, normals=None):
        """(3m x 3n): boundary 1-form nu^k (LW)_kl at the given nodes (default: boundary)."""
        g = self.grid
        if nodes is None:
            nodes, normals = g.boundary_nodes, g.boundary_normals
        n = g.n
        C = self.cko()
        pos = {(i, j): s for s, (i, j) in enumerate(SYM_INDEX)}
        m = len(nodes)
        sel = sp.csr_matrix((np.ones(m), (np.arange(m), nodes)), shape=(m, n))
        blocks = []
        for l in range(3):
            acc = None
            for k in range(3):
                s = pos[(min(k, l), max(k, l))]
                rows = C[s * n:(s + 1) * n]
                term = sp.diags(normals[:, k]) @ (sel @ rows)
                acc = term if acc is None else acc + term
            blocks.append([acc])
        return sp.bmat(blocks, format="csr")


def grid_ops(grid: BallGrid) -> GridOps:
    ops = grid.__dict__.get("_ops")
    if ops is None:
        ops = GridOps(grid)
        grid.__dict__["_ops"] = ops
    return ops


def _cached(grid, name, build):
    cache = grid.__dict__.setdefault("_mats", {})
    if name not in cache:
        cache[name] = build()
    return cache[name]


def vec(values: np.ndarray) -> np.ndarray:
    """(n, c) node-major values -> component-major flat vector."""
    return np.ascontiguousarray(np.asarray(values).T).ravel()


def unvec(x: np.ndarray, ncomp: int) -> np.ndarray:
    return np.asarray(x).reshape(ncomp, -1).T.copy()


# ---------------------------------------------------------------------------
# operator application

_KINDS = ("gradient", "laplacian", "cko", "vec-laplacian", "tensor-div")


def operator_matrix(grid: BallGrid, kind: str):
    ops = grid_ops(grid)
    builders = {
        "gradient": ops.gradient,
        "laplacian": ops.laplacian,
        "cko": ops.cko,
        "vec-laplacian": ops.vec_laplacian,
        "tensor-div": ops.tensor_div,
    }
    if kind not in builders:
        raise ValueError(f"unknown operator {kind!r}; expected one of {_KINDS}")
    return _cached(grid, kind, builders[kind])


def apply_operator(kind: str, field, nodes=None):
    """Apply a discrete operator.

    Without ``nodes`` the full output field is returned (non-centered stencils
    near the boundary).  With ``nodes`` the values at those nodes are returned
    as an array, and every node must carry the centered stencil the operator
    needs, otherwise ``StencilOutOfDomain`` is raised.
    """
    grid = field.grid
    expected = {"gradient": ScalarField, "laplacian": ScalarField, "cko": OneFormField,
                "vec-laplacian": OneFormField, "tensor-div": SymTensorField}
    if kind in expected and not isinstance(field, expected[kind]):
        raise TypeError(f"{kind} expects a {expected[kind].__name__}")
    M = operator_matrix(grid, kind)
    out = M @ (field.values if isinstance(field, ScalarField) else vec(field.values))
    if kind == "laplacian":
        res = ScalarField(grid, out)
    elif kind == "cko":
        res = SymTensorField(grid, unvec(out, 6))
    else:
        res = OneFormField(grid, unvec(out, 3))
    if nodes is None:
        return res
    nodes = np.asarray(nodes, dtype=int)
    support = grid_ops(grid).hessian_support if kind == "vec-laplacian" else grid.interior_mask
    if np.any(~support[nodes]):
        bad = nodes[~support[nodes]][0]
        raise StencilOutOfDomain(f"{kind} lacks stencil support at node {bad} ({grid.points[bad]})")
    return res.values[nodes]


def adjointness_residual(W: OneFormField, Z: OneFormField) -> float:
    """|<vecLap W, Z> - 1/2 <LW, LZ>| / (1 + |<LW, LZ>|), sums weighted by h^3."""
    from .grid import inner

    lhs = inner(apply_operator("vec-laplacian", W), Z)
    LL = inner(apply_operator("cko", W), apply_operator("cko", Z))
    return abs(lhs - 0.5 * LL) / (1.0 + abs(LL))


def symbol_quadratic_form(xi, eta) -> float:
    """(L(xi) eta) . eta for the principal symbol |xi|^2 eta + (1/3)(xi.eta) xi."""
    xi = np.asarray(xi, float)
    eta = np.asarray(eta, float)
    L = (xi @ xi) * eta + (xi @ eta) * xi / 3.0
    return float(L @ eta)


# ---------------------------------------------------------------------------
# linear solves


@dataclass(frozen=True)
class LinearSolverConfig:
    tol_rel: float = 1e-10
    max_iter: int = 2000
    method: str = "auto"  # auto | direct | gmres | bicgstab | cg
    compat_tol: float = 0.05
    cond_limit: float = 1e12

    def __post_init__(self):
        if not (0 < self.tol_rel <= 1e-2):
            raise ValueError("tol_rel must lie in (0, 1e-2]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.method not in ("auto", "direct", "gmres", "bicgstab", "cg"):
            raise ValueError(f"unknown method {self.method!r}")


class _Factored:
    """Sparse LU with singularity detection."""

    def __init__(self, A, cfg: LinearSolverConfig):
        A = sp.csc_matrix(A)
        self.A = A
        self.cfg = cfg
        try:
            self.lu = spla.splu(A)
        except RuntimeError as exc:
            raise SingularOperator(f"factorization failed: {exc}") from exc
        d = np.abs(self.lu.U.diagonal())
        if d.size and (d.min() == 0 or not np.all(np.isfinite(d))):
            raise SingularOperator("zero pivot in LU factorization")
        inv = spla.LinearOperator(A.shape, matvec=self.lu.solve, rmatvec=lambda b: self.lu.solve(b, trans="T"),
                                  dtype=float)
        cond = spla.onenormest(inv) * spla.norm(A, 1)
        if not np.isfinite(cond) or cond > cfg.cond_limit:
            raise SingularOperator(f"operator numerically singular (condition estimate {cond:.3g})")
        self.cond = float(cond)

    def solve(self, b):
        x = self.lu.solve(np.asarray(b, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SingularOperator("non-finite solution")
        r = np.linalg.norm(self.A @ x - b)
        if r > max(self.cfg.tol_rel * np.linalg.norm(b), 1e-300) and r > 1e-12 * np.linalg.norm(b):
            # one step of iterative refinement before giving up
            x = x + self.lu.solve(b - self.A @ x)
            r = np.linalg.norm(self.A @ x - b)
            if r > self.cfg.tol_rel * np.linalg.norm(b):
                raise SolverDiverged(f"direct solve residual {r:.3g} above tolerance")
        return x


DIRECT_LIMIT = 15000


def resolve_method(cfg: LinearSolverConfig, size: int) -> str:
    if cfg.method == "auto":
        return "direct" if size <= DIRECT_LIMIT else "gmres"
    return cfg.method


def solve_linear(A, b, cfg: LinearSolverConfig, x0=None):
    """Solve A x = b by the configured method."""
    b = np.asarray(b, dtype=float)
    if not np.any(b):
        return np.zeros(A.shape[1])
    method = resolve_method(cfg, A.shape[0])
    if method == "direct":
        return _Factored(A, cfg).solve(b)
    A = sp.csr_matrix(A)
    ilu = None
    try:
        ilu = spla.spilu(sp.csc_matrix(A), drop_tol=1e-5, fill_factor=20)
        M = spla.LinearOperator(A.shape, ilu.solve)
    except RuntimeError:
        M = None
    solver = {"gmres": spla.gmres, "bicgstab": spla.bicgstab, "cg": spla.cg}[method]
    kw = dict(rtol=cfg.tol_rel, atol=0.0, maxiter=cfg.max_iter, M=M, x0=x0)
    if method == "gmres":
        kw["restart"] = 100
    x, info = solver(A, b, **kw)
    if info > 0:
        raise SolverDiverged(f"{method} did not converge in {cfg.max_iter} iterations")
    if info < 0 or not np.all(np.isfinite(x)):
        raise SingularOperator(f"{method} breakdown")
    return x


# boundary conditions --------------------------------------------------------


@dataclass(frozen=True)
class Dirichlet:
    values: np.ndarray  # per node; only boundary entries are used


@dataclass(frozen=True)
class Robin:
    """d_nu v + kappa(x) v = 0 on the boundary.

    ``kind="decay"`` uses kappa = 1/|x|, discretized as d_nu(|x| v) = 0 so that
    const/|x| is exact; ``kind="conformal"`` uses kappa = |x|/(1+|x|^2),
    discretized as d_nu(v/U) = 0 so that v = c U is exact.
    """

    kind: str = "decay"

    def __post_init__(self):
        if self.kind not in ("decay", "conformal"):
            raise ValueError(f"unknown Robin kind {self.kind!r}")

    def kappa(self, x):
        r = np.linalg.norm(x, axis=-1)
        return 1.0 / r if self.kind == "decay" else r / (1.0 + r * r)

    def model(self, x):
        """The profile the discrete condition reproduces exactly (up to a constant)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "decay":
            return 1.0 / np.linalg.norm(x, axis=-1)
        return conformal_factor_values(x)


def conformal_factor_values(points):
    return np.sqrt(2.0 / (1.0 + np.sum(np.asarray(points) ** 2, axis=-1)))


def sphere_laplacian_matrix(grid: BallGrid):
    """Conservative chart form of the round-sphere Laplacian, -U^-6 d_k(U^2 d_k w).

    Rows at boundary nodes are zero; those rows are replaced by boundary conditions.
    """

    def build():
        n, h = grid.n, grid.h
        U0 = conformal_factor_values(grid.points)
        rows, cols, vals = [], [], []
        inn = grid.interior_nodes
        diag = np.zeros(len(inn))
        for k in range(3):
            for s in (1, -1):
                nb = grid.neighbor(s * AXES[k])[inn]
                mid = grid.points[inn] + 0.5 * s * h * AXES[k]
                c = conformal_factor_values(mid) ** 2 / (h * h * U0[inn] ** 6)
                rows.append(inn)
                cols.append(nb)
                vals.append(-c)
                diag += c
        rows.append(inn)
        cols.append(inn)
        vals.append(diag)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))

    return _cached(grid, "sphere-laplacian", build)


def scalar_principal_matrix(grid: BallGrid, form: str = "euclid"):
    """Principal part at interior nodes.

    ``euclid``: the flat Laplacian.  ``conformal``: U^5 (Delta_h(v/U) + (3/4) v/U),
    which equals the flat Laplacian in the continuum and is exact on v = c U.
    """
    if form == "euclid":
        return operator_matrix(grid, "laplacian")
    if form == "conformal":
        def build():
            U = conformal_factor_values(grid.points)
            return (sp.diags(U**5) @ sphere_laplacian_matrix(grid) @ sp.diags(1.0 / U)
                    + sp.diags(0.75 * U**4)).tocsr()
        return _cached(grid, "conformal-laplacian", build)
    raise ValueError(f"unknown scalar form {form!r}")


def scalar_system(grid: BallGrid, c, bc, form: str = "euclid"):
    """Sparse matrix with interior rows (Delta + c) and boundary rows from the BC."""
    n = grid.n
    interior = grid.interior_mask.astype(float)
    L = scalar_principal_matrix(grid, form)
    c = np.broadcast_to(np.asarray(c, dtype=float), (n,))
    A_int = sp.diags(interior) @ (L + sp.diags(c))
    bn = grid.boundary_nodes
    sel = sp.csr_matrix((np.ones(len(bn)), (bn, bn)), shape=(n, n))
    if isinstance(bc, Dirichlet):
        A_bd = sel
    elif isinstance(bc, Robin):
        ops = grid_ops(grid)
        nu = np.zeros((n, 3))
        nu[bn] = grid.boundary_normals
        # phi_b * d_nu(v / phi); boundary stencils never reach the origin
        with np.errstate(divide="ignore"):
            phi = bc.model(grid.points)
        phi[~np.isfinite(phi)] = 1.0
        A_bd = sp.diags(nu[:, 0]) @ ops.D[0] + sp.diags(nu[:, 1]) @ ops.D[1] + sp.diags(nu[:, 2]) @ ops.D[2]
        A_bd = sel @ sp.diags(phi) @ A_bd @ sp.diags(1.0 / phi)
    else:
        raise TypeError(f"unsupported boundary condition {bc!r}")
    return (A_int + A_bd).tocsr()


def scalar_rhs(grid: BallGrid, rhs, bc):
    b = np.where(grid.interior_mask, np.asarray(rhs, dtype=float), 0.0)
    if isinstance(bc, Dirichlet):
        vals = np.asarray(bc.values.values if isinstance(bc.values, ScalarField) else bc.values, dtype=float)
        b = np.where(grid.boundary_mask, np.broadcast_to(vals, (grid.n,)), b)
    return b


def scalar_bvp_solve(c, rhs: ScalarField, bc, cfg: LinearSolverConfig | None = None, form: str = "euclid"):
    """Solve Delta v + c v = rhs at interior nodes with the boundary condition ``bc``."""
    cfg = cfg or LinearSolverConfig()
    grid = rhs.grid
    cv = c.values if isinstance(c, ScalarField) else c
    A = scalar_system(grid, cv, bc, form)
    b = scalar_rhs(grid, rhs.values, bc)
    if resolve_method(cfg, grid.n) == "direct":
        fac = _Factored(A, cfg)
        x = fac.solve(b) if np.any(b) else np.zeros(grid.n)
    else:
        x = solve_linear(A, b, cfg)
    return ScalarField(grid, x)


# vector Neumann problem -------------------------------------------------------


def _basis_array(basis, n):
    if hasattr(basis, "fields"):
        arr = np.stack([f.values for f in basis.fields])
    else:
        arr = np.asarray(basis, dtype=float)
    if arr.ndim != 3 or arr.shape[1:] != (n, 3):
        raise ValueError("killing basis must be (m, n, 3)")
    return arr


# weight of the interior equation added to each traction row (stable for positive values)
BOUNDARY_BLEND = 0.5


class VectorNeumannSolver:
    """Traction problem for the vector Laplacian, solved orthogonally to the Killing space.

    Interior rows: vecLap Z (+ drift_j (LZ)_ij) + sum_l mu_l M_l = F.
    Boundary rows: nu^k (LZ)_kl / h + BOUNDARY_BLEND * (interior row) = G_l / h + BOUNDARY_BLEND * F.
    Side condition: sum_nodes orth_weight <K_l, Z> h^3 = 0.
    Multiplier columns: M_l = mult_weight K_l on interior rows.

    This saddle-point system is solved without assembling its dense border.
    Sampled conformal Killing fields are exact discrete kernel elements, so
    the operator is regularized by a diagonal shift at 10 pinned unknowns,
    the multipliers come from the left null vectors N = A_reg^-T E, and the
    Killing component is projected out afterwards.  The result is the
    bordered solution.  The factorization is built lazily on the first
    nonzero right-hand side.
    """

    def __init__(self, grid: BallGrid, basis, cfg: LinearSolverConfig | None = None,
                 drift=None, orth_weight=None, mult_weight=None):
        self.grid = grid
        self.cfg = cfg or LinearSolverConfig()
        n = grid.n
        K = _basis_array(basis, n)
        self.K = K
        m = len(K)
        self._Kflat = np.stack([vec(K[l]) for l in range(m)], axis=1)
        ops = grid_ops(grid)
        inner_sel = np.repeat(grid.interior_mask[None, :], 3, axis=0).ravel().astype(float)
        A = operator_matrix(grid, "vec-laplacian")
        if drift is not None:
            dv = np.asarray(drift, dtype=float)
            C = operator_matrix(grid, "cko")
            pos = {(i, j): s for s, (i, j) in enumerate(SYM_INDEX)}
            blocks = []
            for i in range(3):
                acc = None
                for j in range(3):
                    s = pos[(min(i, j), max(i, j))]
                    t = sp.diags(dv[:, j]) @ C[s * n:(s + 1) * n]
                    acc = t if acc is None else acc + t
                blocks.append([acc])
            A = A + sp.bmat(blocks, format="csr")
        A_int = sp.diags(inner_sel) @ A
        # traction rows sit at the boundary node positions, scaled by 1/h to match the interior rows;
        # blending in the equation itself (an O(h^2) change of the flux) removes spurious boundary modes
        A_int = A_int + BOUNDARY_BLEND * sp.diags(1.0 - inner_sel) @ A
        T = ops.traction()
        bn = grid.boundary_nodes
        nb = len(bn)
        place = sp.csr_matrix(
            (np.full(3 * nb, 1.0 / grid.h), (np.concatenate([bn + c * n for c in range(3)]), np.arange(3 * nb))),
            shape=(3 * n, 3 * nb))
        self.A = (A_int + place @ T).tocsr()
        mw = np.ones(n) if mult_weight is None else np.asarray(mult_weight, float)
        ow = np.ones(n) if orth_weight is None else np.asarray(orth_weight, float)
        self._mult = np.stack([vec(K[l] * (mw * grid.interior_mask)[:, None]) for l in range(m)], axis=1)
        self._orth = vec(np.repeat(ow[:, None], 3, axis=1))
        gram = (self._Kflat * self._orth[:, None]).T @ self._Kflat * grid.cell_volume
        self._gram_inv = np.linalg.inv(gram)
        _, _, piv = _pivoted_qr(self._Kflat.T)
        self.pins = np.sort(piv[:m])
        self._fac = None
        self.last_multipliers = np.zeros(m)
        self.last_compat = 0.0

    def _factorize(self):
        n3 = self.A.shape[0]
        m = len(self.K)
        shift = sp.csr_matrix((np.full(m, 1.0 / self.grid.h**2), (self.pins, self.pins)), shape=(n3, n3))
        self._fac = _Factored(self.A + shift, self.cfg)
        E = np.zeros((n3, m))
        E[self.pins, np.arange(m)] = 1.0
        self._N = np.stack([self._fac.lu.solve(E[:, l], trans="T") for l in range(m)], axis=1)
        NtM = self._N.T @ self._mult
        if np.linalg.cond(NtM) > 1e12:
            raise SingularOperator("multiplier columns do not complement the operator range")
        self._NtM_inv = np.linalg.inv(NtM)

    def solve(self, rhs, traction=None, check_compat: bool = True) -> OneFormField:
        grid = self.grid
        n = grid.n
        F = rhs.values if isinstance(rhs, OneFormField) else np.asarray(rhs, float)
        if traction is None:
            G = np.zeros((len(grid.boundary_nodes), 3))
        elif isinstance(traction, OneFormField):
            G = traction.values[grid.boundary_nodes]
        else:
            G = np.asarray(traction, dtype=float)
            if G.shape == (n, 3):
                G = G[grid.boundary_nodes]
        Fi = F * grid.interior_mask[:, None]
        bvals = np.zeros((n, 3))
        bvals[grid.boundary_nodes] = G / grid.h + BOUNDARY_BLEND * F[grid.boundary_nodes]
        b = vec(Fi) + vec(bvals)
        m = len(self.K)
        if not np.any(b):
            self.last_multipliers = np.zeros(m)
            self.last_compat = 0.0
            return OneFormField(grid, np.zeros((n, 3)))
        if self._fac is None:
            self._factorize()
        mu = self._NtM_inv @ (self._N.T @ b)
        used = self._mult @ mu
        z = self._fac.solve(b - used)
        z = z - self._Kflat @ (self._gram_inv @ (self._Kflat.T @ (self._orth * z) * grid.cell_volume))
        self.last_multipliers = mu
        scale = max(np.abs(Fi).max(), np.abs(G).max() if G.size else 0.0, 1e-300)
        self.last_compat = float(np.abs(used).max() / scale)
        if check_compat and self.last_compat > self.cfg.compat_tol:
            raise IncompatibleData(
                f"data not orthogonal to the Killing space (multiplier share {self.last_compat:.3g})")
        return OneFormField(grid, unvec(z, 3))


def _pivoted_qr(M):
    return sla.qr(M, pivoting=True, mode="economic")


def vector_bvp_solve(rhs: OneFormField, traction, killing_basis, cfg: LinearSolverConfig | None = None,
                     **kw) -> OneFormField:
    """Neumann-traction problem for the vector Laplacian, solution orthogonal to the Killing space."""
    return VectorNeumannSolver(rhs.grid, killing_basis, cfg, **kw).solve(rhs, traction)
