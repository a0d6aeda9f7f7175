"""Statistical and linear-algebra kernels used by every other module.

Everything here is a pure function of its inputs: univariate normal
CDF/quantile pairs (with log-space tails, since censored likelihood terms need
log Phi far into the tails), multivariate normal log-densities driven by a
Cholesky factor, the conditional-normal mean/variance of one coordinate given
a block, and Gauss-Hermite rules in the probabilists' convention

    integral f(z) phi(z) dz  ~=  sum_k w_k f(z_k),   sum_k w_k = 1,

so that quadrature weights compose directly with normal posteriors without
any sqrt(2) bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError, NumericError, UsageError

LOG_2PI = math.log(2.0 * math.pi)

MAX_GH_ORDER = 50


def normal_cdf(z):
    """Standard normal CDF Phi(z). Scalar or ndarray; rejects non-finite input."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("normal_cdf requires finite input")
    out = special.ndtr(z)
    return float(out) if out.ndim == 0 else out

def normal_logcdf(z):
    """log Phi(z), stable in the far left tail."""
    z = np.asarray(z, dtype=float)
    out = special.log_ndtr(z)
    return float(out) if out.ndim == 0 else out

def normal_logpdf(z):
    z = np.asarray(z, dtype=float)
    out = -0.5 * (LOG_2PI + z * z)
    return float(out) if out.ndim == 0 else out


def normal_quantile(p):
    """Inverse standard normal CDF; domain (0, 1) strictly."""
    p = np.asarray(p, dtype=float)
    if not np.all((p > 0.0) & (p < 1.0)):
        raise DomainError("normal_quantile requires 0 < p < 1")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def normal_quantile_from_log(log_p):
    """Phi^{-1}(exp(log_p)) without forming exp(log_p); stable for tiny p."""
    log_p = np.asarray(log_p, dtype=float)
    if not np.all(log_p < 0.0):
        raise DomainError("normal_quantile_from_log requires log_p < 0")
    out = special.ndtri_exp(log_p)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular Cholesky factor of an SPD matrix.

    Holding the factor rather than the matrix keeps every downstream solve,
    log-determinant and sampling step O(d^2) and guarantees positive
    definiteness by construction (the diagonal is checked to be strictly
    positive).
    """

    lower: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        if lower.ndim != 2 or lower.shape[0] != lower.shape[1]:
            raise UsageError("CholeskyFactor requires a square matrix")
        if lower.shape[0] > 0:
            if not np.all(np.isfinite(lower)):
                raise NumericError("CholeskyFactor entries must be finite")
            if np.any(np.diag(lower) <= 0.0):
                raise NumericError("CholeskyFactor diagonal must be strictly positive")
        lower = np.tril(lower)
        lower.setflags(write=False)
        object.__setattr__(self, "lower", lower)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @classmethod
    def from_spd(cls, matrix, context: str = "matrix", subject_id=None) -> "CholeskyFactor":
        """Factor an SPD matrix; failure is a hard error naming the context."""
        matrix = np.asarray(matrix, dtype=float)
        try:
            lower = np.linalg.cholesky(matrix)
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                f"{context} is not positive definite: {exc}", subject_id=subject_id
            ) from None
        return cls(lower)

    def reconstruct(self) -> np.ndarray:
        """Return L @ L.T."""
        return self.lower @ self.lower.T

    def logdet(self) -> float:
        """log det(L L') = 2 sum log L_kk."""
        if self.dim == 0:
            return 0.0
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve(self, rhs) -> np.ndarray:
        """Solve (L L') x = rhs via two triangular solves."""
        rhs = np.asarray(rhs, dtype=float)
        if self.dim == 0:
            return rhs.copy()
        from scipy.linalg import solve_triangular

        half = solve_triangular(self.lower, rhs, lower=True, check_finite=False)
        return solve_triangular(self.lower.T, half, lower=False, check_finite=False)

    def whiten(self, vec) -> np.ndarray:
        """Solve L u = vec (maps N(0, LL') samples to N(0, I))."""
        vec = np.asarray(vec, dtype=float)
        if self.dim == 0:
            return vec.copy()
        from scipy.linalg import solve_triangular

        return solve_triangular(self.lower, vec, lower=True, check_finite=False)


def mvn_logpdf(x, mean, chol: CholeskyFactor) -> float:
    """Log-density of N(mean, L L') at x.

    Evaluated as -0.5 (d log 2pi + log det + |L^{-1}(x-mean)|^2), which is the
    exact density, not an approximation.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if x.shape != mean.shape or x.shape[0] != chol.dim:
        raise UsageError(
            f"mvn_logpdf dimension mismatch: x {x.shape}, mean {mean.shape}, chol dim {chol.dim}"
        )
    if chol.dim == 0:
        return 0.0
    u = chol.whiten(x - mean)
    return -0.5 * (chol.dim * LOG_2PI + chol.logdet() + float(u @ u))


def conditional_normal(z_y, R_ty, R_y_chol: CholeskyFactor, subject_id=None):
    """Conditional law of the unit-variance event coordinate given the y block.

    For the standardized joint vector (Z_t, Z_y) with corr(Z_t, Z_y) = R_ty and
    corr(Z_y) = R_y, returns

        mu     = R_ty R_y^{-1} z_y
        sigma2 = 1 - R_ty R_y^{-1} R_ty'

    sigma2 must land in (0, 1]; anything else means the assembled (1 + n_i)
    correlation matrix was not positive definite, which is reported as a hard
    numeric error rather than silently regularized.
    """
    z_y = np.atleast_1d(np.asarray(z_y, dtype=float))
    R_ty = np.atleast_1d(np.asarray(R_ty, dtype=float))
    if z_y.shape != R_ty.shape or R_ty.shape[0] != R_y_chol.dim:
        raise UsageError("conditional_normal: R_ty, z_y and R_y dimensions disagree")
    if R_y_chol.dim == 0:
        return 0.0, 1.0
    a = R_y_chol.solve(R_ty)
    sigma2 = 1.0 - float(R_ty @ a)
    if not sigma2 > 0.0:
        raise NumericError(
            f"conditional variance {sigma2:.3e} <= 0: copula correlation matrix "
            "is not positive definite for this measurement schedule",
            subject_id=subject_id,
        )
    return float(a @ z_y), min(sigma2, 1.0)


@dataclass(frozen=True)
class GaussHermiteRule:
    """Nodes/weights integrating against the standard normal density."""

    order_per_dim: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def tensor_grid(self, dim: int):
        """Tensor-product grid over `dim` dimensions.

        Returns (points, log_weights) with points of shape (order^dim, dim).
        Log weights are returned because the integrand is combined with
        log-space contributions under a log-sum-exp reduction.
        """
        if dim < 1:
            raise UsageError("tensor_grid requires dim >= 1")
        grids = np.meshgrid(*([self.nodes] * dim), indexing="ij")
        points = np.stack([g.reshape(-1) for g in grids], axis=-1)
        logw = np.log(self.weights)
        lw = np.zeros(points.shape[0])
        for axis in range(dim):
            idx = np.meshgrid(*([np.arange(self.order_per_dim)] * dim), indexing="ij")[axis]
            lw += logw[idx.reshape(-1)]
        return points, lw


def gauss_hermite_rule(order: int) -> GaussHermiteRule:
    """Probabilists' Gauss-Hermite rule of the given order (1..50).

    Exact for polynomials of degree <= 2*order - 1 against phi(z) dz; weights
    sum to one.
    """
    if not isinstance(order, (int, np.integer)) or isinstance(order, bool):
        raise UsageError("quadrature order must be an integer")
    if order < 1 or order > MAX_GH_ORDER:
        raise UsageError(f"quadrature order must be in [1, {MAX_GH_ORDER}], got {order}")
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / math.sqrt(2.0 * math.pi)
    return GaussHermiteRule(order_per_dim=int(order), nodes=nodes, weights=weights)
