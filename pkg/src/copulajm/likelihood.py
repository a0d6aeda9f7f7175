"""Copula joint log-likelihood.

Per subject the observed-data contribution is

    log f(y_i) + log integral { delta_i f(t_i | y_i, b)
                                + (1 - delta_i) S(t_i | y_i, b) } f(b | y_i) db

where f(y_i) is the longitudinal marginal with covariance
V_y = Z D Z' + sigma^2 R_y, f(b | y_i) is the exact normal posterior of the
random effects given the measurements, and the survival factors are the
copula-conditional quantities built from the standardized scores

    Z_t = Phi^{-1}(F_T(t | b)),      Z_y = (y - X beta1 - Z b) / sigma,
    mu = R_ty R_y^{-1} Z_y,          sigma_c^2 = 1 - R_ty R_y^{-1} R_ty'.

Writing the integral against f(b | y_i) instead of the prior f(b) recenters
the Gauss-Hermite grid on each subject's own posterior, so a small tensor rule
(order 9 per dimension by default) is accurate; nodes are shifted and scaled
by the posterior mean and Cholesky factor.

F_T(t | b) is clamped to [1e-15, 1 - 1e-15] before Phi^{-1} so that extreme
quadrature nodes cannot inject infinities; every clamp is counted in the
telemetry object so saturation stays observable.

Two evaluation paths exist on purpose: a per-subject path that follows the
formulas one object at a time (used by tests and the prediction module), and
`LikelihoodEvaluator`, which pads the dataset into rectangular arrays once and
evaluates the total log-likelihood for a parameter vector in a handful of
batched linear-algebra calls. Both must agree to ~1e-10; a test enforces it.
Subjects are always reduced in id-sorted order so the total is deterministic
and permutation invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special
from scipy.special import logsumexp

from . import hazard as hz
from .errors import NumericError, UsageError
from .modelcore import ModelParams, SubjectRecord, assemble_full_R, build_R
from .statmath import LOG_2PI, CholeskyFactor, GaussHermiteRule, gauss_hermite_rule

F_CLAMP = 1e-15


@dataclass
class ClampTelemetry:
    """Counts how often F_T(t|b) had to be clamped away from {0, 1}."""

    count: int = 0

    def add(self, n: int):
        self.count += int(n)


def clamped_event_score(H, telemetry: Optional[ClampTelemetry] = None):
    """Z_t = Phi^{-1}(F) from cumulative hazards H, with tail clamping."""
    F = -np.expm1(-np.asarray(H, dtype=float))
    outside = (F < F_CLAMP) | (F > 1.0 - F_CLAMP)
    if telemetry is not None and np.any(outside):
        telemetry.add(np.count_nonzero(outside))
    return special.ndtri(np.clip(F, F_CLAMP, 1.0 - F_CLAMP))


def _alpha_terms(params: ModelParams):
    if params.r > 2:
        raise UsageError(
            "survival closed form supports intercept(+slope) random effects only (r <= 2)"
        )
    a0 = params.alpha[0]
    a1 = params.alpha[1] if params.r == 2 else 0.0
    return a0, a1


@dataclass
class SubjectWorkspace:
    """Everything about one (subject, params) pair that does not depend on b.

    Immutable once built; contribution functions only read from it. mu_base
    and mu_coef give the conditional mean of the event score as the affine
    function mu(b) = mu_base - mu_coef . b.
    """

    subject: SubjectRecord
    R_ty: np.ndarray
    R_y_chol: CholeskyFactor
    v_y_chol: CholeskyFactor
    post_mean: np.ndarray
    post_chol: CholeskyFactor
    loglik_y: float
    a: np.ndarray
    sigma_c2: float
    mu_base: float
    mu_coef: np.ndarray

    @property
    def sigma_c(self) -> float:
        return math.sqrt(self.sigma_c2)


def longitudinal_marginal(subject: SubjectRecord, params: ModelParams) -> SubjectWorkspace:
    """Marginal longitudinal density and the normal posterior of b given y.

    V_y = Z D Z' + sigma^2 R_y; posterior mean D Z' V_y^{-1} (y - X beta1) and
    covariance D - D Z' V_y^{-1} Z D follow from the joint normality of
    (y, b). For a survival-only subject the posterior is the prior and
    loglik_y = 0.
    """
    R_ty, R_y_chol = build_R(params.corr, subject.times, subject.obs_time, subject.id)
    D = params.D
    r = params.r
    n = subject.n_obs
    if subject.z_rows.shape[1] != r or subject.x_rows.shape[1] != params.p:
        raise UsageError(f"design width mismatch for subject {subject.id!r}")
    if n == 0:
        return SubjectWorkspace(
            subject=subject, R_ty=R_ty, R_y_chol=R_y_chol,
            v_y_chol=CholeskyFactor(np.empty((0, 0))),
            post_mean=np.zeros(r), post_chol=params.d_chol, loglik_y=0.0,
            a=np.zeros(0), sigma_c2=1.0, mu_base=0.0, mu_coef=np.zeros(r),
        )
    Z = subject.z_rows
    X = subject.x_rows
    R_y = R_y_chol.reconstruct()
    V = Z @ D @ Z.T + params.sigma ** 2 * R_y
    v_chol = CholeskyFactor.from_spd(V, context="V_y", subject_id=subject.id)
    res = subject.y - X @ params.beta1
    vres = v_chol.solve(res)
    VinvZ = v_chol.solve(Z)
    loglik_y = -0.5 * (n * LOG_2PI + v_chol.logdet() + float(res @ vres))
    post_mean = D @ (Z.T @ vres)
    B = D - D @ (Z.T @ VinvZ) @ D
    B = 0.5 * (B + B.T)
    post_chol = CholeskyFactor.from_spd(B, context="posterior covariance of b|y",
                                        subject_id=subject.id)
    a = R_y_chol.solve(R_ty)
    sigma_c2 = 1.0 - float(R_ty @ a)
    if not sigma_c2 > 0.0:
        raise NumericError(
            f"conditional variance {sigma_c2:.3e} <= 0 in copula assembly",
            subject_id=subject.id,
        )
    return SubjectWorkspace(
        subject=subject, R_ty=R_ty, R_y_chol=R_y_chol, v_y_chol=v_chol,
        post_mean=post_mean, post_chol=post_chol, loglik_y=loglik_y,
        a=a, sigma_c2=min(sigma_c2, 1.0),
        mu_base=float(a @ res) / params.sigma,
        mu_coef=(Z.T @ a) / params.sigma,
    )


def _survival_scores(ws: SubjectWorkspace, params: ModelParams, b, telemetry):
    """(Z_t, mu, H, log_h) at the observed time for random-effect values b."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a0, a1 = _alpha_terms(params)
    const = float(ws.subject.w @ params.beta2) + a0 * b[:, 0]
    slope = a1 * b[:, 1] if params.r == 2 else np.zeros(b.shape[0])
    t = ws.subject.obs_time
    H = hz.cum_hazard_raw(params.lam, params.knots, const, slope, np.asarray(t))
    log_h = hz.log_hazard_raw(params.lam, params.knots, const, slope, np.asarray(t))
    Z_t = clamped_event_score(H, telemetry)
    mu = ws.mu_base - b @ ws.mu_coef
    return Z_t, mu, H, log_h


def event_contribution(ws: SubjectWorkspace, params: ModelParams, b,
                       telemetry: Optional[ClampTelemetry] = None):
    """log f(t_i | y_i, b) for an observed event (delta = 1).

    Equals log phi(Z_t; mu, sigma_c^2) + log f_T(t_i | b) - log phi(Z_t); with
    R_ty = 0 the first and last terms cancel exactly and the conventional
    conditional-independence density log f_T(t_i | b) remains.
    """
    scalar = np.ndim(b) == 1
    Z_t, mu, H, log_h = _survival_scores(ws, params, b, telemetry)
    out = (-0.5 * math.log(ws.sigma_c2)
           - (Z_t - mu) ** 2 / (2.0 * ws.sigma_c2)
           + 0.5 * Z_t ** 2
           + log_h - H)
    return float(out[0]) if scalar else out


def censored_contribution(ws: SubjectWorkspace, params: ModelParams, b,
                          telemetry: Optional[ClampTelemetry] = None):
    """log P(T* > t_i | y_i, b) = log Phi((mu - Z_t)/sigma_c), tail-stable."""
    scalar = np.ndim(b) == 1
    Z_t, mu, _, _ = _survival_scores(ws, params, b, telemetry)
    out = special.log_ndtr((mu - Z_t) / ws.sigma_c)
    return float(out[0]) if scalar else out


def integrate_conditional(ws: SubjectWorkspace, params: ModelParams,
                          rule: GaussHermiteRule,
                          telemetry: Optional[ClampTelemetry] = None) -> float:
    """log integral of the survival factor against f(b | y), subject-adaptive.

    Nodes are shifted/scaled by the posterior mean and Cholesky factor of
    f(b | y); the reduction is a log-sum-exp since contributions can span
    hundreds of log units across nodes.
    """
    nodes, logw = rule.tensor_grid(params.r)
    b = ws.post_mean + nodes @ ws.post_chol.lower.T
    if ws.subject.event == 1:
        contrib = event_contribution(ws, params, b, telemetry)
    else:
        contrib = censored_contribution(ws, params, b, telemetry)
    return float(logsumexp(logw + contrib))


def subject_loglik(subject: SubjectRecord, params: ModelParams,
                   rule: GaussHermiteRule,
                   telemetry: Optional[ClampTelemetry] = None) -> float:
    """Observed-data log-likelihood contribution of one subject."""
    try:
        ws = longitudinal_marginal(subject, params)
        return ws.loglik_y + integrate_conditional(ws, params, rule, telemetry)
    except NumericError:
        raise
    except FloatingPointError as exc:  # pragma: no cover - defensive
        raise NumericError(str(exc), subject_id=subject.id)


def _mvn_logpdf_rows(X: np.ndarray, chol: CholeskyFactor) -> np.ndarray:
    """Log N(0, LL') density of each row of X."""
    if chol.dim == 0:
        return np.zeros(X.shape[0])
    from scipy.linalg import solve_triangular

    U = solve_triangular(chol.lower, X.T, lower=True, check_finite=False)
    return -0.5 * (chol.dim * LOG_2PI + chol.logdet() + np.sum(U * U, axis=0))


def subject_loglik_direct(subject: SubjectRecord, params: ModelParams,
                          rule: GaussHermiteRule,
                          telemetry: Optional[ClampTelemetry] = None) -> float:
    """Same quantity integrated in the prior parameterization.

    Evaluates log integral {delta f(t, y | b) + (1 - delta) f(T > t, y | b)}
    f(b) db directly, with the event density taken through the full
    (1 + n_i)-dimensional copula normal. Kept as an independent route for
    verifying the adaptive factorization; prior-centered nodes need a much
    higher order for the same accuracy.
    """
    times = subject.times
    R_ty, R_y_chol = build_R(params.corr, times, subject.obs_time, subject.id)
    n = subject.n_obs
    nodes, logw = rule.tensor_grid(params.r)
    b = nodes @ params.d_chol.lower.T
    a0, a1 = _alpha_terms(params)
    const = float(subject.w @ params.beta2) + a0 * b[:, 0]
    slope = a1 * b[:, 1] if params.r == 2 else np.zeros(b.shape[0])
    t = subject.obs_time
    H = hz.cum_hazard_raw(params.lam, params.knots, const, slope, np.asarray(t))
    Z_t = clamped_event_score(H, telemetry)
    res = subject.y - subject.x_rows @ params.beta1
    Z_y = (res - b @ subject.z_rows.T) / params.sigma
    if subject.event == 1:
        log_h = hz.log_hazard_raw(params.lam, params.knots, const, slope, np.asarray(t))
        full_chol = CholeskyFactor.from_spd(
            assemble_full_R(params.corr, times), context="R_i", subject_id=subject.id)
        scores = np.concatenate([Z_t[:, None], Z_y], axis=1)
        vals = (-n * math.log(params.sigma)
                + _mvn_logpdf_rows(scores, full_chol)
                + (log_h - H)
                - (-0.5 * (LOG_2PI + Z_t ** 2)))
    else:
        if n:
            aa = R_y_chol.solve(R_ty)
            sigma_c2 = 1.0 - float(R_ty @ aa)
            mu = Z_y @ aa
        else:
            sigma_c2, mu = 1.0, np.zeros(b.shape[0])
        vals = (-n * math.log(params.sigma)
                + _mvn_logpdf_rows(Z_y, R_y_chol)
                + special.log_ndtr((mu - Z_t) / math.sqrt(sigma_c2)))
    return float(logsumexp(logw + vals))


@dataclass
class _Components:
    """Batched per-subject pieces shared by the EM and posterior routines."""

    loglik_y: np.ndarray        # (S,)
    post_mean: np.ndarray       # (S, r)
    post_chol: np.ndarray       # (S, r, r)
    b_nodes: np.ndarray         # (S, Q, r)
    contrib: np.ndarray         # (S, Q) survival factor at each node
    log_weights: np.ndarray     # (Q,)
    subject_loglik: np.ndarray  # (S,)


class LikelihoodEvaluator:
    """Batched total log-likelihood over a fixed dataset.

    Pads every subject to the maximum measurement count once (padded slots are
    masked out of every quadratic form and determinant) and evaluates
    total_loglik(theta) with stacked linear algebra. Subjects are held in
    id-sorted order, so the summation order is fixed no matter how the input
    was arranged.
    """

    def __init__(self, subjects: Sequence[SubjectRecord], order: int = 9):
        if not subjects:
            self.n_subjects = 0
            self.order = order
            return
        subjects = sorted((s.check() for s in subjects), key=lambda s: s.id)
        self.subjects = subjects
        self.n_subjects = S = len(subjects)
        p = subjects[0].x_rows.shape[1]
        q = subjects[0].w.shape[0]
        r = subjects[0].z_rows.shape[1]
        if r > 2:
            raise UsageError("survival closed form supports r <= 2 random effects")
        for s in subjects:
            if s.x_rows.shape[1] != p or s.z_rows.shape[1] != r or s.w.shape[0] != q:
                raise UsageError(f"inconsistent design widths at subject {s.id!r}")
        self.p, self.q, self.r = p, q, r
        n = max(1, max(s.n_obs for s in subjects))
        self.n_max = n
        self.ids = [s.id for s in subjects]
        self.times = np.zeros((S, n))
        self.mask = np.zeros((S, n), dtype=bool)
        self.y = np.zeros((S, n))
        self.X = np.zeros((S, n, p))
        self.Z = np.zeros((S, n, r))
        self.w = np.zeros((S, q))
        self.obs_time = np.zeros(S)
        self.event = np.zeros(S, dtype=bool)
        self.n_obs = np.zeros(S, dtype=int)
        for i, s in enumerate(subjects):
            k = s.n_obs
            self.times[i, :k] = s.times
            self.mask[i, :k] = True
            self.y[i, :k] = s.y
            self.X[i, :k] = s.x_rows
            self.Z[i, :k] = s.z_rows
            self.w[i] = s.w
            self.obs_time[i] = s.obs_time
            self.event[i] = s.event == 1
            self.n_obs[i] = k
        self.n_pad = n - self.n_obs
        self.order = order
        self.rule = gauss_hermite_rule(order)
        self.nodes, self.log_weights = self.rule.tensor_grid(r)
        # index-lag matrix reused by ar1_index; time gaps are per subject
        self._index_lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
        self._mask_outer = self.mask[:, :, None] & self.mask[:, None, :]
        self._eye = np.eye(n)

    # -- correlation assembly ------------------------------------------------

    def _within_batch(self, spec):
        """Batched R_y; None signals the identity (fast path downstream)."""
        S, n = self.n_subjects, self.n_max
        if spec.within == "identity" or spec.rho_y == 0.0:
            return None
        if spec.within == "ar1_index":
            lag = np.broadcast_to(self._index_lag, (S, n, n))
        else:
            lag = np.abs(self.times[:, :, None] - self.times[:, None, :])
        R = math.copysign(1.0, spec.rho_y) * np.abs(spec.rho_y) ** lag
        R = np.where(self._mask_outer, R, 0.0)
        R[:, np.arange(n), np.arange(n)] = 1.0
        return R

    def _cross_batch(self, spec) -> np.ndarray:
        if spec.cross == "zero" or spec.rho_ty == 0.0:
            return np.zeros((self.n_subjects, self.n_max))
        if spec.cross == "exchangeable":
            row = np.full((self.n_subjects, self.n_max), spec.rho_ty)
        elif spec.cross == "power_decay":
            expo = np.abs(self.times - spec.t_ref)
            row = math.copysign(1.0, spec.rho_ty) * np.abs(spec.rho_ty) ** expo
        else:
            if not hasattr(self, "_exponent_pad"):
                pad = np.ones((self.n_subjects, self.n_max))
                for i, s in enumerate(self.subjects):
                    if s.n_obs:
                        exps = np.asarray(spec.exponents, dtype=float)
                        if spec.slot_times is None:
                            idx = np.minimum(np.arange(s.n_obs), len(exps) - 1)
                        else:
                            slots = np.asarray(spec.slot_times, dtype=float)
                            idx = np.array([
                                next(iter(np.nonzero(np.isclose(slots, t, atol=1e-8))[0]),
                                     len(exps) - 1)
                                for t in s.times])
                        pad[i, :s.n_obs] = exps[idx]
                self._exponent_pad = pad
            row = math.copysign(1.0, spec.rho_ty) * np.abs(spec.rho_ty) ** self._exponent_pad
        return np.where(self.mask, row, 0.0)

    def _batched_chol(self, mats, context):
        try:
            return np.linalg.cholesky(mats)
        except np.linalg.LinAlgError:
            for i in range(mats.shape[0]):
                try:
                    np.linalg.cholesky(mats[i])
                except np.linalg.LinAlgError:
                    raise NumericError(f"{context} is not positive definite",
                                       subject_id=self.ids[i]) from None
            raise

    # -- main evaluation -----------------------------------------------------

    def _conditional_parts(self, params: ModelParams):
        """Workspace arrays for all subjects at the given parameters."""
        spec = params.corr
        S, n = self.n_subjects, self.n_max
        R_y = self._within_batch(spec)
        R_ty = self._cross_batch(spec)
        if R_y is None:
            a = R_ty.copy()
        else:
            self._batched_chol(R_y, "within-longitudinal correlation")
            a = np.linalg.solve(R_y, R_ty[:, :, None])[:, :, 0]
        sigma_c2 = 1.0 - np.einsum("sn,sn->s", R_ty, a)
        bad = sigma_c2 <= 0.0
        if np.any(bad):
            i = int(np.argmin(sigma_c2))
            raise NumericError(
                f"conditional variance {sigma_c2[i]:.3e} <= 0: copula correlation "
                "matrix is not positive definite for this schedule",
                subject_id=self.ids[i])
        sigma_c2 = np.minimum(sigma_c2, 1.0)
        D = params.D
        V = np.matmul(self.Z @ D, np.swapaxes(self.Z, 1, 2))
        if R_y is None:
            V[:, np.arange(n), np.arange(n)] += params.sigma ** 2
        else:
            V += params.sigma ** 2 * R_y
        V_chol = self._batched_chol(V, "V_y")
        res = np.where(self.mask, self.y - self.X @ params.beta1, 0.0)
        rhs = np.concatenate([res[:, :, None], self.Z], axis=2)
        sol = np.linalg.solve(V, rhs)
        vres = sol[:, :, 0]
        VinvZ = sol[:, :, 1:]
        logdetV = 2.0 * np.sum(np.log(np.diagonal(V_chol, axis1=1, axis2=2)), axis=1)
        logdetV -= self.n_pad * math.log(params.sigma ** 2)
        loglik_y = -0.5 * (self.n_obs * LOG_2PI + logdetV
                           + np.einsum("sn,sn->s", res, vres))
        Zt_vres = np.einsum("snr,sn->sr", self.Z, vres)
        post_mean = Zt_vres @ D
        M = np.matmul(np.swapaxes(self.Z, 1, 2), VinvZ)
        B = D[None] - D @ M @ D
        B = 0.5 * (B + np.swapaxes(B, 1, 2))
        post_chol = self._batched_chol(B, "posterior covariance of b|y")
        mu_base = np.einsum("sn,sn->s", a, res) / params.sigma
        mu_coef = np.einsum("sn,snr->sr", a, self.Z) / params.sigma
        return dict(loglik_y=loglik_y, post_mean=post_mean, post_chol=post_chol,
                    a=a, sigma_c2=sigma_c2, mu_base=mu_base, mu_coef=mu_coef,
                    R_ty=R_ty, res=res)

    def _node_contrib(self, params: ModelParams, parts,
                      telemetry: Optional[ClampTelemetry]):
        """Survival factor log-contributions at all quadrature nodes: (S, Q)."""
        b = parts["post_mean"][:, None, :] + np.matmul(
            self.nodes, np.swapaxes(parts["post_chol"], 1, 2))
        a0, a1 = _alpha_terms(params)
        const = (self.w @ params.beta2)[:, None] + a0 * b[:, :, 0]
        slope = a1 * b[:, :, 1] if self.r == 2 else np.zeros_like(const)
        t = self.obs_time[:, None]
        H = hz.cum_hazard_raw(params.lam, params.knots, const, slope, t)
        Z_t = clamped_event_score(H, telemetry)
        mu = parts["mu_base"][:, None] - np.matmul(b, parts["mu_coef"][:, :, None])[:, :, 0]
        sigma_c2 = parts["sigma_c2"][:, None]
        contrib = np.empty_like(H)
        ev = self.event
        if np.any(ev):
            log_h = hz.log_hazard_raw(params.lam, params.knots,
                                      const[ev], slope[ev], t[ev])
            contrib[ev] = (-0.5 * np.log(sigma_c2[ev])
                           - (Z_t[ev] - mu[ev]) ** 2 / (2.0 * sigma_c2[ev])
                           + 0.5 * Z_t[ev] ** 2
                           + log_h - H[ev])
        if not np.all(ev):
            ce = ~ev
            contrib[ce] = special.log_ndtr((mu[ce] - Z_t[ce]) / np.sqrt(sigma_c2[ce]))
        return b, contrib

    def per_subject(self, params: ModelParams,
                    telemetry: Optional[ClampTelemetry] = None) -> np.ndarray:
        """Per-subject log-likelihood contributions, id-sorted order."""
        if self.n_subjects == 0:
            return np.zeros(0)
        parts = self._conditional_parts(params)
        _, contrib = self._node_contrib(params, parts, telemetry)
        integral = logsumexp(self.log_weights[None, :] + contrib, axis=1)
        values = parts["loglik_y"] + integral
        if not np.all(np.isfinite(values) | (values == -np.inf)):
            i = int(np.nonzero(~(np.isfinite(values) | (values == -np.inf)))[0][0])
            raise NumericError("non-finite likelihood contribution",
                               subject_id=self.ids[i])
        return values

    def loglik(self, params: ModelParams,
               telemetry: Optional[ClampTelemetry] = None) -> float:
        if self.n_subjects == 0:
            return 0.0
        return float(np.sum(self.per_subject(params, telemetry)))

    def components(self, params: ModelParams,
                   telemetry: Optional[ClampTelemetry] = None) -> _Components:
        """Node-level pieces for E-steps and posterior diagnostics."""
        parts = self._conditional_parts(params)
        b, contrib = self._node_contrib(params, parts, telemetry)
        integral = logsumexp(self.log_weights[None, :] + contrib, axis=1)
        return _Components(
            loglik_y=parts["loglik_y"], post_mean=parts["post_mean"],
            post_chol=parts["post_chol"], b_nodes=b, contrib=contrib,
            log_weights=self.log_weights,
            subject_loglik=parts["loglik_y"] + integral,
        )


def total_loglik(subjects: Sequence[SubjectRecord], params: ModelParams,
                 rule_or_order=9,
                 telemetry: Optional[ClampTelemetry] = None) -> float:
    """Sum of subject log-likelihoods in id-sorted order.

    Convenience wrapper building a one-shot evaluator; fitting code holds a
    `LikelihoodEvaluator` instead so the padding work is done once.
    """
    order = (rule_or_order.order_per_dim
             if isinstance(rule_or_order, GaussHermiteRule) else int(rule_or_order))
    if not subjects:
        return 0.0
    return LikelihoodEvaluator(subjects, order=order).loglik(params, telemetry)
