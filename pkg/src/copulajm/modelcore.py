"""Domain types for data, parameters and correlation structures.

The parameter vector theta of the joint model collects the longitudinal fixed
effects beta1 and error SD sigma, the random-effects covariance D, the
survival coefficients beta2, the association vector alpha, the
piecewise-constant baseline heights lambda_k, and the copula correlation
parameters (rho_ty between the event coordinate and the measurements, rho_y
within the measurements). `pack`/`unpack` give a smooth bijection to an
unconstrained vector (log for sigma and lambda, log-Cholesky for D, atanh for
correlations) so that generic optimizers never leave the valid region.

`build_R` assembles, for one subject's measurement schedule, the cross row
R_ty and the within block R_y of the copula correlation matrix

    R_i = [[1,     R_ty ],
           [R_ty', R_y  ]]

and verifies positive definiteness of the full matrix via the Schur
complement 1 - R_ty R_y^{-1} R_ty' > 0.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, NumericError, UsageError
from .statmath import CholeskyFactor, conditional_normal

WITHIN_FAMILIES = ("identity", "ar1_index", "ar1_gap")
CROSS_FAMILIES = ("zero", "exchangeable", "power_decay", "exponent_vector")


def _readonly(arr, dtype=float):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


def _signed_power(rho: float, exponent):
    """sign(rho) * |rho|**e, continuous in rho through 0 for fractional e."""
    exponent = np.asarray(exponent, dtype=float)
    if rho == 0.0:
        return np.zeros_like(exponent)
    return math.copysign(1.0, rho) * np.abs(rho) ** exponent


@dataclass(frozen=True)
class CorrelationSpec:
    """Parametric recipe for the per-subject copula correlation matrix.

    within: structure of R_y over the measurement schedule
        - "identity":   conditional independence between measurements
        - "ar1_index":  rho_y^|j-k| over measurement positions
        - "ar1_gap":    rho_y^|t_j-t_k| over measurement times
    cross: structure of the event/measurement row R_ty
        - "zero":            conventional conditional independence
        - "exchangeable":    constant rho_ty
        - "power_decay":     rho_ty^|t_j - t_ref| (t_ref anchors the event
                             coordinate near the end of follow-up)
        - "exponent_vector": rho_ty^e_j with a per-schedule-slot exponent list
                             (slot_times maps exponents to scheduled times;
                             without it, exponents apply positionally)
    """

    within: str = "identity"
    cross: str = "zero"
    rho_y: float = 0.0
    rho_ty: float = 0.0
    t_ref: Optional[float] = None
    exponents: Optional[tuple] = None
    slot_times: Optional[tuple] = None

    def __post_init__(self):
        if self.within not in WITHIN_FAMILIES:
            raise UsageError(f"unknown within-structure {self.within!r}")
        if self.cross not in CROSS_FAMILIES:
            raise UsageError(f"unknown cross-structure {self.cross!r}")
        for name, value in (("rho_y", self.rho_y), ("rho_ty", self.rho_ty)):
            if not (math.isfinite(value) and abs(value) < 1.0):
                raise UsageError(f"{name} must lie in (-1, 1), got {value}")
        if self.within == "identity" and self.rho_y != 0.0:
            object.__setattr__(self, "rho_y", 0.0)
        if self.cross == "zero" and self.rho_ty != 0.0:
            object.__setattr__(self, "rho_ty", 0.0)
        if self.cross == "power_decay" and self.t_ref is None:
            raise UsageError("power_decay cross-structure requires t_ref")
        if self.cross == "exponent_vector":
            if not self.exponents:
                raise UsageError("exponent_vector cross-structure requires exponents")
            exps = tuple(float(e) for e in self.exponents)
            if any(e <= 0.0 for e in exps):
                raise UsageError("exponent_vector exponents must be strictly positive")
            object.__setattr__(self, "exponents", exps)
            if self.slot_times is not None:
                slots = tuple(float(t) for t in self.slot_times)
                if len(slots) != len(exps):
                    raise UsageError("slot_times must match exponents in length")
                object.__setattr__(self, "slot_times", slots)

    @property
    def free_rho_y(self) -> bool:
        return self.within != "identity"

    @property
    def free_rho_ty(self) -> bool:
        return self.cross != "zero"

    def with_rhos(self, rho_ty=None, rho_y=None) -> "CorrelationSpec":
        changes = {}
        if rho_ty is not None and self.free_rho_ty:
            changes["rho_ty"] = float(rho_ty)
        if rho_y is not None and self.free_rho_y:
            changes["rho_y"] = float(rho_y)
        return dataclasses.replace(self, **changes) if changes else self

    def cross_row(self, times) -> np.ndarray:
        """Cross-correlation entries for measurements at the given times."""
        times = np.asarray(times, dtype=float)
        n = times.shape[0]
        if self.cross == "zero" or n == 0:
            return np.zeros(n)
        if self.cross == "exchangeable":
            return np.full(n, self.rho_ty)
        if self.cross == "power_decay":
            return _signed_power(self.rho_ty, np.abs(times - self.t_ref))
        exps = np.asarray(self.exponents, dtype=float)
        if self.slot_times is None:
            idx = np.minimum(np.arange(n), len(exps) - 1)
        else:
            slots = np.asarray(self.slot_times, dtype=float)
            idx = np.empty(n, dtype=int)
            for j, t in enumerate(times):
                matches = np.nonzero(np.isclose(slots, t, rtol=0.0, atol=1e-8))[0]
                # times beyond the declared schedule inherit the last exponent
                idx[j] = matches[0] if matches.size else len(exps) - 1
        return _signed_power(self.rho_ty, exps[idx])

    def within_matrix(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        n = times.shape[0]
        if self.within == "identity" or n == 0:
            return np.eye(n)
        if self.within == "ar1_index":
            lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
        else:
            lag = np.abs(np.subtract.outer(times, times))
        return _signed_power(self.rho_y, lag) if self.rho_y != 0.0 else np.eye(n)


def build_R(spec: CorrelationSpec, times, obs_time=None, subject_id=None):
    """Assemble (R_ty, chol(R_y)) for one measurement schedule.

    Verifies the full (1 + n_i) correlation matrix is positive definite; the
    within block is checked by Cholesky and the event coordinate via the Schur
    complement. A failure means the CorrelationSpec is invalid for this
    schedule and is raised with context, never repaired.
    """
    times = np.asarray(times, dtype=float)
    if times.size > 1 and not np.all(np.diff(times) > 0.0):
        raise UsageError("measurement times must be strictly increasing")
    R_y = spec.within_matrix(times)
    R_ty = spec.cross_row(times)
    chol = CholeskyFactor.from_spd(
        R_y,
        context=f"within-longitudinal correlation ({spec.within}, rho_y={spec.rho_y})",
        subject_id=subject_id,
    )
    # Schur-complement positivity of the full (1+n) matrix
    conditional_normal(np.zeros(times.shape[0]), R_ty, chol, subject_id=subject_id)
    return R_ty, chol


def assemble_full_R(spec: CorrelationSpec, times) -> np.ndarray:
    """The full (1 + n) copula correlation matrix, event coordinate first."""
    times = np.asarray(times, dtype=float)
    n = times.shape[0]
    R = np.empty((n + 1, n + 1))
    R[0, 0] = 1.0
    row = spec.cross_row(times)
    R[0, 1:] = row
    R[1:, 0] = row
    R[1:, 1:] = spec.within_matrix(times)
    return R


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: measurement history plus observed event-time data.

    times must be strictly increasing and never exceed obs_time (measurements
    cannot postdate dropout); n_i = 0 (survival-only) is legal.
    """

    id: str
    times: np.ndarray
    y: np.ndarray
    x_rows: np.ndarray
    z_rows: np.ndarray
    w: np.ndarray
    obs_time: float
    event: int

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        times = _readonly(np.atleast_1d(self.times))
        y = _readonly(np.atleast_1d(self.y))
        x = np.asarray(self.x_rows, dtype=float)
        z = np.asarray(self.z_rows, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(times), -1) if times.size else x.reshape(0, x.shape[0])
        if z.ndim == 1:
            z = z.reshape(len(times), -1) if times.size else z.reshape(0, z.shape[0])
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x_rows", _readonly(x))
        object.__setattr__(self, "z_rows", _readonly(z))
        object.__setattr__(self, "w", _readonly(np.atleast_1d(self.w)))
        object.__setattr__(self, "obs_time", float(self.obs_time))
        object.__setattr__(self, "event", int(self.event))

    @property
    def n_obs(self) -> int:
        return self.times.shape[0]

    def violations(self) -> list:
        """Invariant violations as human-readable strings (empty when valid)."""
        problems = []
        if self.times.ndim != 1 or self.y.shape != self.times.shape:
            problems.append("times and y must be 1-d arrays of equal length")
            return problems
        n = self.n_obs
        if self.x_rows.shape[0] != n or self.z_rows.shape[0] != n:
            problems.append("design matrices must have one row per measurement")
        if n > 1 and not np.all(np.diff(self.times) > 0.0):
            problems.append("measurement times must be strictly increasing")
        if n > 0 and np.any(self.times < 0.0):
            problems.append("measurement times must be nonnegative")
        if n > 0 and np.any(self.times > self.obs_time + 1e-12):
            problems.append(
                f"measurement at t={self.times.max():.6g} postdates obs_time={self.obs_time:.6g}"
            )
        if not (math.isfinite(self.obs_time) and self.obs_time >= 0.0):
            problems.append("obs_time must be finite and nonnegative")
        if self.event not in (0, 1):
            problems.append(f"event indicator must be 0 or 1, got {self.event}")
        for name, arr in (("y", self.y), ("x_rows", self.x_rows),
                          ("z_rows", self.z_rows), ("w", self.w)):
            if arr.size and not np.all(np.isfinite(arr)):
                problems.append(f"{name} contains non-finite values")
        return problems

    def check(self):
        problems = self.violations()
        if problems:
            raise DataError(f"subject {self.id!r}: " + "; ".join(problems))
        return self

    def history_up_to(self, t: float) -> "SubjectRecord":
        """Restrict the measurement history to times <= t (survival fields kept)."""
        keep = self.times <= t + 1e-12
        return SubjectRecord(
            id=self.id,
            times=self.times[keep],
            y=self.y[keep],
            x_rows=self.x_rows[keep],
            z_rows=self.z_rows[keep],
            w=self.w,
            obs_time=self.obs_time,
            event=self.event,
        )


@dataclass(frozen=True)
class DatasetReport:
    n_subjects: int
    n_events: int
    n_measurements: int
    event_fraction: float
    dropout_fraction: Optional[float]
    dropout_time: Optional[float]
    violations: tuple
    warnings: tuple

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_dataset(subjects: Sequence[SubjectRecord], dropout_time=None) -> DatasetReport:
    """Report-only dataset validation; never raises, never mutates."""
    violations = []
    warnings = []
    n_events = 0
    n_meas = 0
    seen = set()
    for subj in subjects:
        for msg in subj.violations():
            violations.append((subj.id, msg))
        if subj.id in seen:
            violations.append((subj.id, "duplicate subject id"))
        seen.add(subj.id)
        n_events += 1 if subj.event == 1 else 0
        n_meas += subj.n_obs
    n = len(subjects)
    if n == 0:
        warnings.append("empty dataset")
    elif n_events == 0:
        warnings.append("dataset contains no events")
    dropout = None
    if dropout_time is not None and n > 0:
        dropout = sum(1 for s in subjects if s.obs_time < dropout_time) / n
    return DatasetReport(
        n_subjects=n,
        n_events=n_events,
        n_measurements=n_meas,
        event_fraction=(n_events / n) if n else 0.0,
        dropout_fraction=dropout,
        dropout_time=dropout_time,
        violations=tuple(violations),
        warnings=tuple(warnings),
    )


@dataclass(frozen=True)
class ModelParams:
    """Full parameter vector of the copula joint model."""

    beta1: np.ndarray
    beta2: np.ndarray
    sigma: float
    d_chol: CholeskyFactor
    alpha: np.ndarray
    lam: np.ndarray
    knots: np.ndarray
    corr: CorrelationSpec

    def __post_init__(self):
        object.__setattr__(self, "beta1", _readonly(np.atleast_1d(self.beta1)))
        object.__setattr__(self, "beta2", _readonly(np.atleast_1d(self.beta2)))
        object.__setattr__(self, "alpha", _readonly(np.atleast_1d(self.alpha)))
        object.__setattr__(self, "lam", _readonly(np.atleast_1d(self.lam)))
        object.__setattr__(self, "knots", _readonly(np.atleast_1d(self.knots)))
        object.__setattr__(self, "sigma", float(self.sigma))
        if not self.sigma > 0.0:
            raise UsageError(f"sigma must be positive, got {self.sigma}")
        if np.any(self.lam <= 0.0):
            raise UsageError("baseline hazard heights must all be positive")
        if self.knots.shape[0] != self.lam.shape[0] + 1:
            raise UsageError("need K+1 knots for K baseline pieces")
        if self.knots[0] != 0.0 or np.any(np.diff(self.knots) <= 0.0):
            raise UsageError("knots must start at 0 and be strictly increasing")
        if self.alpha.shape[0] != self.d_chol.dim:
            raise UsageError("alpha must have one entry per random effect")

    @classmethod
    def make(cls, beta1, beta2, sigma, D, alpha, lam, knots, corr) -> "ModelParams":
        """Construct from the covariance matrix D (factored internally)."""
        d_chol = CholeskyFactor.from_spd(np.asarray(D, dtype=float), context="D")
        return cls(beta1=beta1, beta2=beta2, sigma=sigma, d_chol=d_chol,
                   alpha=alpha, lam=lam, knots=knots, corr=corr)

    @property
    def D(self) -> np.ndarray:
        return self.d_chol.reconstruct()

    @property
    def p(self) -> int:
        return self.beta1.shape[0]

    @property
    def q(self) -> int:
        return self.beta2.shape[0]

    @property
    def r(self) -> int:
        return self.d_chol.dim

    @property
    def n_pieces(self) -> int:
        return self.lam.shape[0]


def _tril_indices(r):
    rows, cols = np.tril_indices(r)
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class ParamLayout:
    """Ordered map between named parameter blocks and the free vector.

    Block order: beta1, beta2, log sigma, log-Cholesky of D (row-major lower
    triangle, log on the diagonal), alpha (collapsed to one coordinate when
    shared across random effects), log lambda, atanh rho_ty, atanh rho_y.
    """

    p: int
    q: int
    r: int
    K: int
    knots: tuple
    corr: CorrelationSpec
    alpha_shared: bool = False

    @classmethod
    def from_params(cls, params: ModelParams, alpha_shared: bool = False) -> "ParamLayout":
        return cls(p=params.p, q=params.q, r=params.r, K=params.n_pieces,
                   knots=tuple(params.knots.tolist()), corr=params.corr,
                   alpha_shared=alpha_shared)

    @property
    def n_alpha(self) -> int:
        return 1 if self.alpha_shared else self.r

    @property
    def n_dchol(self) -> int:
        return self.r * (self.r + 1) // 2

    def slices(self) -> dict:
        sizes = [("beta1", self.p), ("beta2", self.q), ("log_sigma", 1),
                 ("d_chol", self.n_dchol), ("alpha", self.n_alpha),
                 ("log_lambda", self.K)]
        if self.corr.free_rho_ty:
            sizes.append(("atanh_rho_ty", 1))
        if self.corr.free_rho_y:
            sizes.append(("atanh_rho_y", 1))
        out = {}
        start = 0
        for name, size in sizes:
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def n_free(self) -> int:
        last = list(self.slices().values())[-1]
        return last.stop

    def free_names(self) -> list:
        names = [f"beta1_{j}" for j in range(self.p)]
        names += [f"beta2_{j + 1}" for j in range(self.q)]
        names.append("log_sigma")
        names += [f"d_chol_{i}{j}" for i, j in _tril_indices(self.r)]
        names += ["alpha"] if self.alpha_shared else [f"alpha_{j + 1}" for j in range(self.r)]
        names += [f"log_lambda_{k + 1}" for k in range(self.K)]
        if self.corr.free_rho_ty:
            names.append("atanh_rho_ty")
        if self.corr.free_rho_y:
            names.append("atanh_rho_y")
        return names

    def natural_names(self) -> list:
        """Names for reporting on the natural scale (D as covariance entries)."""
        names = [f"beta1_{j}" for j in range(self.p)]
        names += [f"beta2_{j + 1}" for j in range(self.q)]
        names.append("sigma")
        names += [f"D_{i + 1}{j + 1}" for i, j in _tril_indices(self.r)]
        names += ["alpha"] if self.alpha_shared else [f"alpha_{j + 1}" for j in range(self.r)]
        names += [f"lambda_{k + 1}" for k in range(self.K)]
        if self.corr.free_rho_ty:
            names.append("rho_ty")
        if self.corr.free_rho_y:
            names.append("rho_y")
        return names


def pack(params: ModelParams, layout: ParamLayout) -> np.ndarray:
    """Map ModelParams to the unconstrained vector described by `layout`."""
    if (params.p, params.q, params.r, params.n_pieces) != (layout.p, layout.q, layout.r, layout.K):
        raise UsageError("layout does not match parameter dimensions")
    sl = layout.slices()
    vec = np.empty(layout.n_free)
    vec[sl["beta1"]] = params.beta1
    vec[sl["beta2"]] = params.beta2
    vec[sl["log_sigma"]] = math.log(params.sigma)
    L = params.d_chol.lower
    vec[sl["d_chol"]] = [math.log(L[i, j]) if i == j else L[i, j]
                         for i, j in _tril_indices(layout.r)]
    if layout.alpha_shared:
        if np.ptp(params.alpha) > 1e-12:
            raise UsageError("alpha_shared layout requires equal alpha components")
        vec[sl["alpha"]] = params.alpha[0]
    else:
        vec[sl["alpha"]] = params.alpha
    vec[sl["log_lambda"]] = np.log(params.lam)
    if layout.corr.free_rho_ty:
        vec[sl["atanh_rho_ty"]] = math.atanh(params.corr.rho_ty)
    if layout.corr.free_rho_y:
        vec[sl["atanh_rho_y"]] = math.atanh(params.corr.rho_y)
    return vec


def unpack(vec, layout: ParamLayout) -> ModelParams:
    """Inverse of `pack`; always lands inside the valid parameter region."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (layout.n_free,):
        raise UsageError(f"free vector has length {vec.shape}, layout requires {layout.n_free}")
    sl = layout.slices()
    L = np.zeros((layout.r, layout.r))
    for value, (i, j) in zip(vec[sl["d_chol"]], _tril_indices(layout.r)):
        L[i, j] = math.exp(value) if i == j else value
    alpha = (np.full(layout.r, vec[sl["alpha"]][0]) if layout.alpha_shared
             else vec[sl["alpha"]].copy())
    rho_ty = math.tanh(vec[sl["atanh_rho_ty"]][0]) if layout.corr.free_rho_ty else None
    rho_y = math.tanh(vec[sl["atanh_rho_y"]][0]) if layout.corr.free_rho_y else None
    return ModelParams(
        beta1=vec[sl["beta1"]].copy(),
        beta2=vec[sl["beta2"]].copy(),
        sigma=math.exp(vec[sl["log_sigma"]][0]),
        d_chol=CholeskyFactor(L),
        alpha=alpha,
        lam=np.exp(vec[sl["log_lambda"]]),
        knots=np.asarray(layout.knots),
        corr=layout.corr.with_rhos(rho_ty=rho_ty, rho_y=rho_y),
    )


def natural_values(params: ModelParams, layout: ParamLayout) -> np.ndarray:
    """Parameter values on the natural scale, aligned with natural_names()."""
    D = params.D
    vals = list(params.beta1) + list(params.beta2) + [params.sigma]
    vals += [D[i, j] for i, j in _tril_indices(layout.r)]
    vals += [params.alpha[0]] if layout.alpha_shared else list(params.alpha)
    vals += list(params.lam)
    if layout.corr.free_rho_ty:
        vals.append(params.corr.rho_ty)
    if layout.corr.free_rho_y:
        vals.append(params.corr.rho_y)
    return np.asarray(vals)


@dataclass(frozen=True)
class DesignInfo:
    """How design rows are built from baseline covariates and time.

    Column roles: "1" (intercept), "t" (measurement time), a baseline
    covariate name, or "t*<name>" for a time-by-baseline interaction. The
    random-effects design is restricted to ("1",) or ("1", "t"), which is what
    the survival engine's closed-form cumulative hazard supports.
    """

    fixed: tuple
    random: tuple
    survival: tuple

    def __post_init__(self):
        if tuple(self.random) not in (("1",), ("1", "t")):
            raise UsageError('random-effects design must be ("1",) or ("1", "t")')
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        object.__setattr__(self, "survival", tuple(self.survival))

    @property
    def p(self) -> int:
        return len(self.fixed)

    @property
    def r(self) -> int:
        return len(self.random)

    @property
    def q(self) -> int:
        return len(self.survival)

    def baseline_names(self) -> list:
        names = []
        for role in list(self.fixed) + list(self.survival):
            if role in ("1", "t"):
                continue
            name = role[2:] if role.startswith("t*") else role
            if name not in names:
                names.append(name)
        return names

    def _column(self, role: str, baselines: Mapping, u):
        u = np.asarray(u, dtype=float)
        if role == "1":
            return np.ones_like(u)
        if role == "t":
            return u
        if role.startswith("t*"):
            return u * float(baselines[role[2:]])
        return np.full_like(u, float(baselines[role]))

    def x_at(self, baselines: Mapping, u) -> np.ndarray:
        """Fixed-effects design rows at times u; shape (len(u), p)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.stack([self._column(role, baselines, u) for role in self.fixed], axis=1)

    def z_at(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        cols = [np.ones_like(u)]
        if len(self.random) == 2:
            cols.append(u)
        return np.stack(cols, axis=1)

    def w_of(self, baselines: Mapping) -> np.ndarray:
        return np.asarray([float(baselines[name]) for name in self.survival])
