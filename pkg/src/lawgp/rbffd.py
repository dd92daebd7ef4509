"""Polyharmonic-spline RBF-FD: stencil systems and global sparse operators.

Each stencil solves a dense saddle-point system combining PHS kernels
``phi(r) = r^p`` with a full polynomial tail, which makes every assembled
operator exact on polynomials up to the tail degree.  Global operators map
values on the interpolation set Y to (derivatives of) values on the
evaluation set X and are stored sparse, one stencil per row.

Local coordinates are shifted to the stencil center and scaled by the
stencil radius before factorization; derivative weights are rescaled by the
corresponding power of the radius afterwards.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import NodeSet


class RbfFdError(ValueError):
    pass


class StencilSingularError(RbfFdError):
    def __init__(self, center_index):
        super().__init__(
            f"singular stencil system at center {center_index} "
            "(degenerate node layout)")
        self.center_index = center_index


#: differential order of each supported operator
OPERATOR_ORDERS = {
    "eval": 0, "dx": 1, "dy": 1, "dxx": 2, "dyy": 2, "dxxx": 3,
    "laplacian": 2,
}


@dataclass(frozen=True)
class PhsConfig:
    """PHS exponent and polynomial tail degree.

    The tail degree must at least match the conditional-positive-definiteness
    order of the kernel, i.e. degree >= ceil((exponent - 1) / 2).
    """

    exponent: int = 3
    degree: int = 2

    def __post_init__(self):
        if self.exponent not in (3, 5, 7):
            raise RbfFdError("PHS exponent must be one of 3, 5, 7")
        if self.degree < math.ceil((self.exponent - 1) / 2):
            raise RbfFdError(
                f"polynomial degree {self.degree} too low for r^{self.exponent}")

    def poly_dim(self, dim: int) -> int:
        return math.comb(self.degree + dim, dim)

    def monomial_exponents(self, dim: int) -> np.ndarray:
        """Graded-lexicographic exponent tuples of the polynomial tail."""
        if dim == 1:
            return np.arange(self.degree + 1)[:, None]
        out = []
        for total in range(self.degree + 1):
            for a in range(total, -1, -1):
                out.append((a, total - a))
        return np.asarray(out, dtype=np.int64)


def _phs_apply(op: str, p: int, dim: int, delta: np.ndarray) -> np.ndarray:
    """Apply operator ``op`` to phi(||.||) = ||.||^p at displacements delta."""
    r2 = np.einsum("...i,...i->...", delta, delta)
    r = np.sqrt(r2)
    safe = r > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        if op == "eval":
            return r ** p
        if op == "dx":
            v = p * r ** (p - 2) * delta[..., 0]
        elif op == "dy":
            v = p * r ** (p - 2) * delta[..., 1]
        elif op == "dxx":
            v = p * r ** (p - 2) + p * (p - 2) * r ** (p - 4) * delta[..., 0] ** 2
        elif op == "dyy":
            v = p * r ** (p - 2) + p * (p - 2) * r ** (p - 4) * delta[..., 1] ** 2
        elif op == "laplacian":
            v = p * (p + dim - 2) * r ** (p - 2)
        elif op == "dxxx":
            v = p * (p - 1) * (p - 2) * r ** (p - 4) * delta[..., 0]
        else:
            raise RbfFdError(f"unsupported operator {op!r}")
    return np.where(safe, v, 0.0)


def _falling(a: np.ndarray, k: int) -> np.ndarray:
    out = np.ones_like(a)
    for i in range(k):
        out = out * (a - i)
    return out


def _mono_apply(op: str, exps: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply operator ``op`` to the monomials x^a (y^b) at pts: (q, m)."""
    pts = np.atleast_2d(pts)
    dim = pts.shape[1]

    def term(axis, drop):
        a = exps[:, axis][None, :].astype(float)
        x = pts[:, axis][:, None]
        coef = _falling(a, drop)
        expo = np.maximum(a - drop, 0.0)
        with np.errstate(invalid="ignore"):
            val = np.where(coef != 0.0, x ** expo, 0.0)
        return coef * val

    if op == "eval":
        drops = (0,) * dim
    elif op == "dx":
        drops = (1,) + (0,) * (dim - 1)
    elif op == "dy":
        drops = (0, 1)
    elif op == "dxx":
        drops = (2,) + (0,) * (dim - 1)
    elif op == "dyy":
        drops = (0, 2)
    elif op == "dxxx":
        drops = (3,)
    elif op == "laplacian":
        return sum(_mono_apply(o, exps, pts)
                   for o in (("dxx", "dyy") if dim == 2 else ("dxx",)))
    else:
        raise RbfFdError(f"unsupported operator {op!r}")
    if len(drops) != dim:
        raise RbfFdError(f"operator {op!r} needs a {len(drops)}D domain")
    out = np.ones((pts.shape[0], exps.shape[0]))
    for axis, drop in enumerate(drops):
        out = out * term(axis, drop)
    return out


class StencilSystem:
    """Factorized saddle-point system of one stencil."""

    def __init__(self, coords: np.ndarray, cfg: PhsConfig, center=None,
                 center_index: int = 0):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        n, dim = coords.shape
        m = cfg.poly_dim(dim)
        if n < m:
            raise RbfFdError(
                f"stencil smaller than polynomial basis ({n} < {m})")
        self.cfg = cfg
        self.dim = dim
        self.n = n
        self.m = m
        self.center_index = center_index
        self.center = coords[0].copy() if center is None else np.asarray(center, float)
        rho = np.max(np.linalg.norm(coords - self.center, axis=1))
        self.rho = float(rho) if rho > 0 else 1.0
        self.local = (coords - self.center) / self.rho
        self.exps = cfg.monomial_exponents(dim)

        A = _phs_apply("eval", cfg.exponent, dim,
                       self.local[:, None, :] - self.local[None, :, :])
        P = _mono_apply("eval", self.exps, self.local)
        full = np.zeros((n + m, n + m))
        full[:n, :n] = A
        full[:n, n:] = P
        full[n:, :n] = P.T
        self._lu, self._piv = la.lu_factor(full, check_finite=False)
        d = np.abs(np.diag(self._lu))
        if d.min() <= d.max() * 1e-12:
            raise StencilSingularError(center_index)

    def weight_rows(self, eval_pts: np.ndarray, op: str) -> np.ndarray:
        """RBF-FD weights of ``op`` at each evaluation point: (q, n)."""
        if op not in OPERATOR_ORDERS:
            raise RbfFdError(f"unsupported operator {op!r}")
        pts = np.atleast_2d(np.asarray(eval_pts, dtype=float))
        loc = (pts - self.center) / self.rho
        rhs = np.empty((self.n + self.m, pts.shape[0]))
        rhs[: self.n] = _phs_apply(op, self.cfg.exponent, self.dim,
                                   loc[:, None, :] - self.local[None, :, :]).T
        rhs[self.n:] = _mono_apply(op, self.exps, loc).T
        sol = la.lu_solve((self._lu, self._piv), rhs, check_finite=False)
        scale = self.rho ** (-OPERATOR_ORDERS[op])
        return sol[: self.n].T * scale


def build_stencil_system(coords, cfg: PhsConfig, center_index: int = 0) -> StencilSystem:
    """Build and factorize the saddle-point system for one stencil."""
    return StencilSystem(coords, cfg, center_index=center_index)


def default_stencil_size(cfg: PhsConfig, dim: int) -> int:
    """Stencil size heuristic: 2m+1 in 1D, 2m+5 in 2D.

    The 2D bump over the classic 2m+1 keeps one-sided boundary stencils from
    dominating the refinement error of second-order operators.
    """
    m = cfg.poly_dim(dim)
    return 2 * m + 1 if dim == 1 else 2 * m + 5


# ---------------------------------------------------------------------------
# Global operators
# ---------------------------------------------------------------------------

@dataclass
class SparseOperator:
    """Sparse evaluation or differentiation matrix on (X, Y)."""

    name: str
    matrix: sp.csr_matrix
    stencil_size: int
    is_identity: bool = False

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, field_on_y: np.ndarray) -> np.ndarray:
        return self.matrix @ field_on_y

    def __matmul__(self, other):
        return self.matrix @ other


def assemble_operator(nodeset: NodeSet, cfg: PhsConfig, op: str) -> SparseOperator:
    """Assemble the global sparse matrix of ``op`` from per-stencil weights."""
    if op not in OPERATOR_ORDERS:
        raise RbfFdError(f"unsupported operator {op!r}")
    dim = nodeset.dim
    if op == "dxxx" and dim != 1:
        raise RbfFdError("dxxx requires a 1D domain")
    if op in ("dy", "dyy") and dim != 2:
        raise RbfFdError(f"{op} requires a 2D domain")
    if op == "laplacian" and dim == 1:
        op_effective = "dxx"
    else:
        op_effective = op
    m = cfg.poly_dim(dim)
    n = nodeset.stencil_size
    if n < m:
        raise RbfFdError(f"stencil smaller than polynomial basis ({n} < {m})")

    M, N = nodeset.n_x, nodeset.n_y
    rows = np.repeat(np.arange(M), n)
    cols = np.empty(M * n, dtype=np.int64)
    vals = np.empty(M * n, dtype=float)

    periodic = nodeset.domain.kind == "interval" and nodeset.domain.periodic
    order = np.argsort(nodeset.assignment, kind="stable")
    bounds = np.searchsorted(nodeset.assignment[order],
                             np.arange(N + 1))
    snap_eval = (op == "eval")
    for s in range(N):
        j0, j1 = bounds[s], bounds[s + 1]
        if j0 == j1:
            continue
        xs_idx = order[j0:j1]
        members = nodeset.stencils[s]
        coords = nodeset.points_y[members]
        center = nodeset.points_y[s]
        if periodic:
            coords = center + nodeset.periodic_delta(coords, center[None, :])
        pts = nodeset.points_x[xs_idx]
        if periodic:
            pts = center + nodeset.periodic_delta(pts, center[None, :])
        if snap_eval:
            exact = xs_idx < N  # X extends Y, so x_j with j < N is y_j itself
        else:
            exact = np.zeros(xs_idx.shape[0], dtype=bool)
        need = ~exact
        w = np.zeros((xs_idx.shape[0], n))
        if np.any(need):
            system = StencilSystem(coords, cfg, center_index=s)
            w[need] = system.weight_rows(pts[need], op_effective)
        if np.any(exact):
            # x_j with j < N is y_j itself, i.e. the stencil center: cardinal row
            rows_e = np.where(exact)[0]
            w[rows_e, :] = 0.0
            w[rows_e, 0] = 1.0
        for k, j in enumerate(xs_idx):
            cols[j * n:(j + 1) * n] = members
            vals[j * n:(j + 1) * n] = w[k]
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(M, N))
    mat.sum_duplicates()
    return SparseOperator(name=op, matrix=mat, stencil_size=n,
                          is_identity=(op == "eval" and M == N))


# ---------------------------------------------------------------------------
# Pseudo-inverse of the evaluation operator and global solves
# ---------------------------------------------------------------------------

class EvalPseudoInverse:
    """Moore-Penrose action of the evaluation matrix, factorized once.

    Square systems use a direct sparse LU; overdetermined systems use
    normal equations with a 1e-12 Tikhonov floor.
    """

    def __init__(self, E: SparseOperator):
        M, N = E.shape
        self.shape = (N, M)
        self._E = E
        if E.is_identity:
            self._mode = "identity"
        elif M == N:
            self._mode = "square"
            self._lu = spla.splu(E.matrix.tocsc())
        else:
            self._mode = "normal"
            A = (E.matrix.T @ E.matrix + 1e-12 * sp.eye(N)).tocsc()
            self._lu = spla.splu(A)

    def apply(self, field_on_x: np.ndarray) -> np.ndarray:
        f = np.asarray(field_on_x, dtype=float)
        if f.shape[0] != self._E.shape[0]:
            raise RbfFdError("field length does not match evaluation rows")
        if self._mode == "identity":
            return f.copy()
        if self._mode == "square":
            return self._lu.solve(f)
        return self._lu.solve(self._E.matrix.T @ f)


def pseudo_inverse_apply(E: SparseOperator, field_on_x: np.ndarray) -> np.ndarray:
    """Values on Y recovered from values on X through the eval operator."""
    if E.name != "eval":
        raise RbfFdError("pseudo-inverse is defined for the eval operator")
    cached = getattr(E, "_pinv", None)
    if cached is None:
        cached = EvalPseudoInverse(E)
        E._pinv = cached
    return cached.apply(field_on_x)


class GlobalSolver:
    """Factorized solver for the global (possibly least-squares) system."""

    def __init__(self, L: sp.spmatrix):
        M, N = L.shape
        self._L = L.tocsr()
        if M == N:
            self._mode = "square"
            self._lu = spla.splu(L.tocsc())
        else:
            self._mode = "normal"
            A = (self._L.T @ self._L + 1e-12 * sp.eye(N)).tocsc()
            self._lu = spla.splu(A)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._mode == "square":
            return self._lu.solve(rhs)
        return self._lu.solve(self._L.T @ rhs)


# ---------------------------------------------------------------------------
# Persistence: coordinate-triplet CSV
# ---------------------------------------------------------------------------

def save_operator(op_: SparseOperator, path) -> None:
    coo = op_.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rows", "cols", "nnz"])
        w.writerow([coo.shape[0], coo.shape[1], coo.nnz])
        w.writerow(["row", "col", "value"])
        for i in order:
            w.writerow([coo.row[i], coo.col[i], f"{coo.data[i]:.17g}"])


def load_operator(path, name: str, stencil_size: int) -> SparseOperator:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["rows", "cols", "nnz"]:
            raise RbfFdError(f"bad operator file header in {path}")
        M, N, nnz = (int(v) for v in next(r))
        next(r)  # column header
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=float)
        for i, row in enumerate(r):
            rows[i], cols[i], vals[i] = int(row[0]), int(row[1]), float(row[2])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(M, N))
    return SparseOperator(name=name, matrix=mat, stencil_size=stencil_size,
                          is_identity=(name == "eval" and M == N))
