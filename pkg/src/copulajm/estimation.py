"""Maximum-likelihood estimation and model comparison.

`fit` maximizes the copula joint log-likelihood over the unconstrained vector
(Nelder-Mead warm start followed by a quasi-Newton polish by default), with
standard errors from the inverse of the negative numerical Hessian mapped to
the natural scale by the delta method. `em_fit_blockdiag` implements the EM
algorithm available when the cross block of the copula is zero: closed-form
updates for D, sigma^2, beta1 and the baseline heights (the classical
occurrence/exposure ratio generalized by the exponential-tilt expectations of
the random slope), with the remaining survival-block parameters improved by a
few quasi-Newton steps inside each M-step (an ECM-style update, so the
observed log-likelihood still ascends).

`initialize` follows the usual two-stage strategy: a standalone linear mixed
fit for the longitudinal block, a standalone piecewise-exponential fit for the
survival block, association and copula correlations started at zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special, stats
from scipy.special import logsumexp

from . import hazard as hz
from .errors import NumericError, UsageError
from .likelihood import ClampTelemetry, LikelihoodEvaluator, longitudinal_marginal, \
    censored_contribution, event_contribution
from .modelcore import (CorrelationSpec, ModelParams, ParamLayout, SubjectRecord,
                        natural_values, pack, unpack)
from .statmath import LOG_2PI, CholeskyFactor, gauss_hermite_rule

_PENALTY = 1e10


@dataclass(frozen=True)
class FitOptions:
    """Controls for `fit` and `em_fit_blockdiag`."""

    order: int = 9
    optimizer: str = "hybrid"  # "nelder-mead" | "quasi-newton" | "hybrid"
    nm_iter: int = 200
    max_iter: int = 500
    tol: float = 1e-8
    param_tol: float = 1e-6
    alpha_shared: bool = True
    compute_se: bool = True
    n_pieces: int = 4
    knots: Optional[tuple] = None

    def __post_init__(self):
        if self.optimizer not in ("nelder-mead", "quasi-newton", "hybrid"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.order < 1:
            raise UsageError("quadrature order must be >= 1")


@dataclass(frozen=True)
class FitResult:
    params_hat: ModelParams
    layout: ParamLayout
    loglik: float
    n_params: int
    converged: bool
    iterations: int
    clamp_events: int
    hessian_condition: float
    estimates: dict
    se: Optional[dict]
    cov_free: Optional[np.ndarray]
    messages: tuple = ()
    loglik_trace: tuple = ()

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params


@dataclass
class EmState:
    """Mutable EM loop state: current parameters plus the loglik trace."""

    params: ModelParams
    iteration: int = 0
    loglik_trace: list = field(default_factory=list)


def default_knots(subjects: Sequence[SubjectRecord], n_pieces: int) -> np.ndarray:
    """K-1 equally spaced internal knots over [0, max observed time]."""
    if n_pieces < 1:
        raise UsageError("need at least one baseline piece")
    t_max = max((s.obs_time for s in subjects), default=0.0)
    if t_max <= 0.0:
        raise UsageError("cannot place knots: no positive observation times")
    return np.linspace(0.0, t_max, n_pieces + 1)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _lmm_em(subjects, p, r, max_iter=200, tol=1e-10):
    """EM for the standalone linear mixed model with iid errors."""
    with_data = [s for s in subjects if s.n_obs > 0]
    X_all = np.concatenate([s.x_rows for s in with_data])
    y_all = np.concatenate([s.y for s in with_data])
    N = len(y_all)
    XtX = X_all.T @ X_all
    if np.linalg.matrix_rank(XtX) < p:
        raise UsageError("fixed-effects design is rank deficient")
    beta = np.linalg.solve(XtX, X_all.T @ y_all)
    resid = y_all - X_all @ beta
    sigma2 = max(float(resid @ resid) / max(N - p, 1), 1e-8)
    D = np.eye(r) * max(sigma2, 1e-4)
    n_subj = len(subjects)
    for _ in range(max_iter):
        m_list, B_list = [], []
        for s in subjects:
            if s.n_obs == 0:
                m_list.append(np.zeros(r))
                B_list.append(D.copy())
                continue
            Z = s.z_rows
            V = Z @ D @ Z.T + sigma2 * np.eye(s.n_obs)
            res = s.y - s.x_rows @ beta
            Vinv_res = np.linalg.solve(V, res)
            VinvZ = np.linalg.solve(V, Z)
            m_list.append(D @ (Z.T @ Vinv_res))
            B_list.append(D - D @ (Z.T @ VinvZ) @ D)
        rhs = np.zeros(p)
        for s, m in zip(subjects, m_list):
            if s.n_obs:
                rhs += s.x_rows.T @ (s.y - s.z_rows @ m)
        beta_new = np.linalg.solve(XtX, rhs)
        sse = 0.0
        for s, m, B in zip(subjects, m_list, B_list):
            if not s.n_obs:
                continue
            e = s.y - s.x_rows @ beta_new - s.z_rows @ m
            sse += float(e @ e) + float(np.trace(s.z_rows.T @ s.z_rows @ B))
        sigma2_new = max(sse / N, 1e-10)
        D_new = sum(B + np.outer(m, m) for m, B in zip(m_list, B_list)) / n_subj
        move = max(np.max(np.abs(beta_new - beta)), abs(sigma2_new - sigma2),
                   np.max(np.abs(D_new - D)))
        beta, sigma2, D = beta_new, sigma2_new, D_new
        if move < tol:
            break
    # keep D safely positive definite for the downstream log-Cholesky map
    eigvals, eigvecs = np.linalg.eigh(D)
    eigvals = np.maximum(eigvals, 1e-8)
    D = eigvecs @ np.diag(eigvals) @ eigvecs.T
    return beta, math.sqrt(sigma2), D


def _piecewise_exponential(subjects, knots):
    """Piecewise-exponential fit of (beta2, lambda) ignoring random effects."""
    K = len(knots) - 1
    q = subjects[0].w.shape[0]
    T = np.array([s.obs_time for s in subjects])
    delta = np.array([float(s.event) for s in subjects])
    W = np.stack([s.w for s in subjects])
    lo = knots[:-1]
    hi = np.concatenate([knots[1:-1], [np.inf]])
    exposure = np.clip(np.minimum(T[:, None], hi) - lo, 0.0, None)
    piece = hz.piece_index(knots, T)
    events_k = np.bincount(piece[delta == 1.0].astype(int), minlength=K).astype(float)
    if delta.sum() == 0:
        warnings.warn("no events observed; survival block initialized flat")
        return np.zeros(q), np.full(K, 0.01)

    def negll(v):
        beta2, log_lam = v[:q], v[q:]
        lin = W @ beta2
        with np.errstate(over="ignore"):
            cumhaz = np.exp(lin) * (exposure @ np.exp(log_lam))
        ll = float(np.sum(delta * (log_lam[piece] + lin)) - np.sum(cumhaz))
        return -ll if np.isfinite(ll) else _PENALTY

    lam0 = np.maximum(events_k, 0.5) / np.maximum(exposure.sum(axis=0), 1e-8)
    x0 = np.concatenate([np.zeros(q), np.log(lam0)])
    res = optimize.minimize(negll, x0, method="BFGS",
                            options={"maxiter": 300, "gtol": 1e-6})
    beta2, lam = res.x[:q], np.exp(res.x[q:])
    return beta2, np.clip(lam, 1e-8, None)


def initialize(subjects: Sequence[SubjectRecord], spec: CorrelationSpec,
               knots=None, n_pieces: int = 4) -> ModelParams:
    """Starting values: standalone longitudinal and survival fits, zero copula.

    The association vector and every copula correlation start at exactly zero,
    and beta1/sigma/D come from an internal EM for the linear mixed model.
    """
    subjects = list(subjects)
    if len(subjects) < 2 or not any(s.event == 1 for s in subjects):
        raise UsageError("initialization needs >= 2 subjects and >= 1 event")
    p = subjects[0].x_rows.shape[1]
    r = subjects[0].z_rows.shape[1]
    knots = np.asarray(knots, dtype=float) if knots is not None \
        else default_knots(subjects, n_pieces)
    if not any(s.n_obs for s in subjects):
        warnings.warn("no longitudinal measurements; falling back to zeros/unit sigma")
        beta1, sigma, D = np.zeros(p), 1.0, np.eye(r)
    else:
        beta1, sigma, D = _lmm_em(subjects, p, r)
    beta2, lam = _piecewise_exponential(subjects, knots)
    return ModelParams.make(
        beta1=beta1, beta2=beta2, sigma=sigma, D=D, alpha=np.zeros(r),
        lam=lam, knots=knots, corr=spec.with_rhos(rho_ty=0.0, rho_y=0.0))


# ---------------------------------------------------------------------------
# numerical derivatives
# ---------------------------------------------------------------------------

def numerical_hessian(f, x, rel_step=1e-4):
    """Symmetrized central-difference Hessian of scalar f at x."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    h = rel_step * (1.0 + np.abs(x))
    H = np.empty((n, n))
    f0 = f(x)
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = h[j]
        H[j, j] = (f(x + ej) - 2.0 * f0 + f(x - ej)) / h[j] ** 2
        for k in range(j):
            ek = np.zeros(n)
            ek[k] = h[k]
            H[j, k] = H[k, j] = (
                f(x + ej + ek) - f(x + ej - ek) - f(x - ej + ek) + f(x - ej - ek)
            ) / (4.0 * h[j] * h[k])
    return 0.5 * (H + H.T)


def numerical_jacobian(f_vec, x, rel_step=1e-6):
    x = np.asarray(x, dtype=float)
    h = rel_step * (1.0 + np.abs(x))
    cols = []
    for j in range(x.shape[0]):
        ej = np.zeros_like(x)
        ej[j] = h[j]
        cols.append((f_vec(x + ej) - f_vec(x - ej)) / (2.0 * h[j]))
    return np.stack(cols, axis=1)


def _standard_errors(loglik_fn, layout, x_hat):
    """(se dict, cov_free, condition, messages) from the numerical Hessian."""
    messages = []
    H = numerical_hessian(loglik_fn, x_hat)
    neg = -H
    try:
        eigvals = np.linalg.eigvalsh(neg)
    except np.linalg.LinAlgError:
        return None, None, math.inf, ("hessian eigendecomposition failed",)
    condition = float(eigvals[-1] / eigvals[0]) if eigvals[0] > 0 else math.inf
    if eigvals[0] <= 0.0:
        messages.append("negative Hessian not positive definite; SEs unavailable")
        return None, None, condition, tuple(messages)
    cov_free = np.linalg.inv(neg)
    cov_free = 0.5 * (cov_free + cov_free.T)
    J = numerical_jacobian(lambda v: natural_values(unpack(v, layout), layout), x_hat)
    cov_nat = J @ cov_free @ J.T
    se_nat = np.sqrt(np.clip(np.diag(cov_nat), 0.0, None))
    se = dict(zip(layout.natural_names(), se_nat.tolist()))
    return se, cov_free, condition, tuple(messages)


# ---------------------------------------------------------------------------
# maximum likelihood
# ---------------------------------------------------------------------------

def fit(subjects: Sequence[SubjectRecord], spec: CorrelationSpec,
        options: FitOptions = FitOptions(),
        init: Optional[ModelParams] = None,
        evaluator: Optional[LikelihoodEvaluator] = None) -> FitResult:
    """Maximize the joint log-likelihood over the unconstrained vector.

    Convergence is declared when a quasi-Newton restart from the optimum moves
    the log-likelihood by less than `tol` (relative) and the free vector by
    less than `param_tol` in sup norm. Points where the copula assembly is not
    positive definite are treated as infeasible (large penalty), so the search
    stays inside the valid region without silently repairing anything.
    """
    subjects = list(subjects)
    if init is None:
        init = initialize(subjects, spec, knots=options.knots, n_pieces=options.n_pieces)
    layout = ParamLayout.from_params(init, alpha_shared=options.alpha_shared)
    if evaluator is None:
        evaluator = LikelihoodEvaluator(subjects, order=options.order)

    def loglik_fn(vec):
        try:
            return evaluator.loglik(unpack(vec, layout))
        except NumericError:
            return -_PENALTY

    def neg(vec):
        return -loglik_fn(vec)

    x = pack(init, layout)
    iterations = 0
    messages = []
    if options.optimizer in ("hybrid", "nelder-mead"):
        nm_budget = options.nm_iter if options.optimizer == "hybrid" else options.max_iter
        res = optimize.minimize(neg, x, method="Nelder-Mead",
                                options={"maxiter": nm_budget, "xatol": options.param_tol,
                                         "fatol": 1e-6, "adaptive": True})
        x = res.x
        iterations += res.nit
        nm_converged = bool(res.success)
    if options.optimizer in ("hybrid", "quasi-newton"):
        res = optimize.minimize(neg, x, method="BFGS",
                                options={"maxiter": options.max_iter, "gtol": 5e-5})
        x = res.x
        iterations += res.nit
        ll_main = -res.fun
        # restart check: a fresh quasi-Newton run from the optimum must stall
        res2 = optimize.minimize(neg, x, method="BFGS",
                                 options={"maxiter": 60, "gtol": 5e-5})
        ll_polish = -res2.fun
        moved = np.max(np.abs(res2.x - x)) if res2.x.shape == x.shape else math.inf
        if ll_polish >= ll_main:
            x = res2.x
            iterations += res2.nit
        converged = (abs(ll_polish - ll_main) <= options.tol * (1.0 + abs(ll_polish))
                     and moved <= options.param_tol)
        if iterations >= options.max_iter and not converged:
            messages.append("iteration cap reached before convergence")
    else:
        converged = nm_converged

    params_hat = unpack(x, layout)
    telemetry = ClampTelemetry()
    loglik = evaluator.loglik(params_hat, telemetry)
    se = cov_free = None
    condition = math.nan
    if options.compute_se:
        se, cov_free, condition, se_msgs = _standard_errors(loglik_fn, layout, x)
        messages.extend(se_msgs)
    estimates = dict(zip(layout.natural_names(),
                         natural_values(params_hat, layout).tolist()))
    return FitResult(
        params_hat=params_hat, layout=layout, loglik=loglik,
        n_params=layout.n_free, converged=bool(converged), iterations=int(iterations),
        clamp_events=telemetry.count, hessian_condition=condition,
        estimates=estimates, se=se, cov_free=cov_free, messages=tuple(messages))


@dataclass(frozen=True)
class ComparisonResult:
    delta_aic: float  # aic_a - aic_b; positive favors model b
    lrt_stat: Optional[float]
    lrt_df: Optional[int]
    lrt_pvalue: Optional[float]


def compare(fit_a: FitResult, fit_b: FitResult, lrt: bool = True) -> ComparisonResult:
    """AIC difference plus the likelihood-ratio test of nested fits.

    fit_b must nest fit_a (at least as many free parameters) for the LRT
    fields; the AIC delta is always available.
    """
    delta_aic = fit_a.aic - fit_b.aic
    if not lrt:
        return ComparisonResult(delta_aic, None, None, None)
    if fit_b.n_params < fit_a.n_params:
        raise UsageError("LRT requires fit_b to nest fit_a (n_params_b >= n_params_a)")
    stat = 2.0 * (fit_b.loglik - fit_a.loglik)
    df = fit_b.n_params - fit_a.n_params
    pvalue = float(stats.chi2.sf(stat, df)) if df > 0 else None
    return ComparisonResult(delta_aic, stat, df, pvalue)


# ---------------------------------------------------------------------------
# EM algorithm for the zero-cross (block-diagonal) structure
# ---------------------------------------------------------------------------

def _posterior_moments(evaluator, params):
    """E-step: posterior moments of b given (y, T, delta) at `params`.

    Uses the same subject-adaptive quadrature as the likelihood; with a zero
    cross block the survival factor at each node is exactly f or S given b.
    Returns node values, normalized weights, and first/second moments.
    """
    comp = evaluator.components(params)
    logW = comp.log_weights[None, :] + comp.contrib
    logW = logW - logsumexp(logW, axis=1, keepdims=True)
    W = np.exp(logW)
    Eb = np.einsum("sq,sqr->sr", W, comp.b_nodes)
    Ebb = np.einsum("sq,sqr,sqk->srk", W, comp.b_nodes, comp.b_nodes)
    Var = Ebb - np.einsum("sr,sk->srk", Eb, Eb)
    return comp, W, Eb, Ebb, Var


def _ry_inverse_apply(evaluator, spec, rhs):
    """Batched R_y^{-1} rhs with padded slots left untouched (identity block)."""
    R = evaluator._within_batch(spec)
    if R is None:
        return rhs
    return np.linalg.solve(R, rhs)


def _survival_q_parts(params_alpha, beta2, W, b_nodes, knots, T, w_mat):
    """Profiled survival part of Q: exposures A_ik and the optimal lambda."""
    a0 = params_alpha[0]
    a1 = params_alpha[1] if len(params_alpha) == 2 else 0.0
    lo = knots[:-1]
    hi = np.concatenate([knots[1:-1], [np.inf]])
    up = np.minimum(T[:, None], hi)
    width = np.maximum(up - lo, 0.0)
    up = lo + width
    d = (a1 * b_nodes[:, :, 1]) if b_nodes.shape[2] == 2 else np.zeros(b_nodes.shape[:2])
    d = d[:, :, None]
    arg = d * width
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        psi = (np.exp(d * up) - np.exp(d * lo)) / d
    small = (np.abs(arg) < hz.SMALL_SLOPE_WIDTH) & (width > 0.0)
    if np.any(small):
        mid = (d * (lo + up) / 2.0)[small]
        np.place(psi, small, np.exp(mid) * np.broadcast_to(width, psi.shape)[small])
    psi = np.where(width > 0.0, psi, 0.0)
    tilt = np.exp(a0 * b_nodes[:, :, 0])
    A = np.einsum("sq,sq,sqk->sk", W, tilt, psi)  # E[e^{a0 b0} psi_k]
    A = A * np.exp(w_mat @ beta2)[:, None]
    return A


def em_fit_blockdiag(subjects: Sequence[SubjectRecord], spec: CorrelationSpec,
                     options: FitOptions = FitOptions(order=15),
                     init: Optional[ModelParams] = None,
                     max_em_iter: int = 500) -> FitResult:
    """EM for the scenario-2 structure (cross block identically zero).

    M-step: D and beta1/sigma^2 by their closed forms, baseline heights by the
    occurrence/exposure ratio with the exponential-tilt expectation of the
    random slope in the denominator, (beta2, alpha) by a few quasi-Newton
    steps on the profiled expected complete-data log-likelihood, rho_y by a
    one-dimensional maximization that includes the log-determinant term.
    """
    if spec.cross != "zero":
        raise UsageError("em_fit_blockdiag requires a zero cross block")
    subjects = list(subjects)
    if init is None:
        init = initialize(subjects, spec, knots=options.knots, n_pieces=options.n_pieces)
    layout = ParamLayout.from_params(init, alpha_shared=options.alpha_shared)
    evaluator = LikelihoodEvaluator(subjects, order=options.order)
    # static arrays in evaluator (id-sorted) order
    T = evaluator.obs_time
    delta = evaluator.event.astype(float)
    w_mat = evaluator.w
    X, Z, mask, y = evaluator.X, evaluator.Z, evaluator.mask, evaluator.y
    N = int(evaluator.n_obs.sum())
    knots = np.asarray(init.knots)
    K = len(knots) - 1
    piece = hz.piece_index(knots, T)
    events_k = np.bincount(piece[delta == 1.0].astype(int), minlength=K).astype(float)
    q = w_mat.shape[1]
    r = evaluator.r

    state = EmState(params=init)
    state.loglik_trace.append(evaluator.loglik(state.params))
    converged = False
    for iteration in range(1, max_em_iter + 1):
        params = state.params
        comp, W, Eb, Ebb, Var = _posterior_moments(evaluator, params)
        spec_now = params.corr
        # beta1: generalized least squares against R_y
        RinvX = _ry_inverse_apply(evaluator, spec_now, X)
        target = np.where(mask, y - np.einsum("snr,sr->sn", Z, Eb), 0.0)
        Rinv_target = _ry_inverse_apply(evaluator, spec_now, target[:, :, None])[:, :, 0]
        A_mat = np.einsum("snp,snk->pk", X, RinvX)
        beta1 = np.linalg.solve(A_mat, np.einsum("snp,sn->p", X, Rinv_target))
        # sigma^2: quadratic form of the residuals against R_y^{-1}
        res = np.where(mask, y - X @ beta1, 0.0)
        Rinv_res = _ry_inverse_apply(evaluator, spec_now, res[:, :, None])[:, :, 0]
        RinvZ = _ry_inverse_apply(evaluator, spec_now, Z)
        G = np.matmul(np.swapaxes(Z, 1, 2), RinvZ)  # Z' R^{-1} Z
        quad = (np.einsum("sn,sn->", res, Rinv_res)
                - 2.0 * np.einsum("sn,snr,sr->", Rinv_res, Z, Eb)
                + np.einsum("srk,srk->", G, Var + np.einsum("sr,sk->srk", Eb, Eb)))
        sigma2 = max(quad / N, 1e-12)
        # D: mean of posterior second moments
        D_new = Ebb.mean(axis=0)
        D_new = 0.5 * (D_new + D_new.T)
        # (beta2, alpha) with lambda profiled out (B.4 exactly at the optimum)
        def neg_q_surv(v):
            beta2_v = v[:q]
            alpha_v = np.full(r, v[q]) if options.alpha_shared else v[q:]
            A = _survival_q_parts(evaluator, alpha_v, beta2_v, W,
                                  comp.b_nodes, knots, T, delta, w_mat)
            Ek = A.sum(axis=0)
            if np.any(~np.isfinite(Ek)) or np.any(Ek <= 0.0):
                return _PENALTY
            lam_v = np.maximum(events_k, 1e-8) / Ek
            val = float(np.sum(events_k * np.log(lam_v))
                        + np.sum(delta * (w_mat @ beta2_v
                                          + alpha_v[0] * Eb[:, 0]
                                          + (alpha_v[1] * T * Eb[:, 1] if r == 2 else 0.0)))
                        - np.sum(lam_v * Ek))
            return -val if np.isfinite(val) else _PENALTY

        v0 = np.concatenate([params.beta2,
                             [params.alpha[0]] if options.alpha_shared else params.alpha])
        res_sv = optimize.minimize(neg_q_surv, v0, method="BFGS",
                                   options={"maxiter": 25, "gtol": 1e-7})
        v_new = res_sv.x if res_sv.fun <= neg_q_surv(v0) else v0
        beta2 = v_new[:q]
        alpha = np.full(r, v_new[q]) if options.alpha_shared else v_new[q:]
        A = _survival_q_parts(alpha, beta2, W, comp.b_nodes, knots, T, w_mat)
        lam = np.maximum(events_k, 1e-8) / A.sum(axis=0)
        # rho_y by one-dimensional maximization of its Q terms
        corr = spec_now
        if spec_now.free_rho_y:
            EbbT = Var + np.einsum("sr,sk->srk", Eb, Eb)

            def neg_q_rho(rho):
                trial = spec_now.with_rhos(rho_y=float(rho))
                R = evaluator._within_batch(trial)
                if R is None:
                    logdet = 0.0
                    Rr, RZ = res, Z
                else:
                    try:
                        chol = np.linalg.cholesky(R)
                    except np.linalg.LinAlgError:
                        return _PENALTY
                    logdet = 2.0 * float(np.sum(np.log(
                        np.diagonal(chol, axis1=1, axis2=2))))
                    sol = np.linalg.solve(R, np.concatenate([res[:, :, None], Z], axis=2))
                    Rr, RZ = sol[:, :, 0], sol[:, :, 1:]
                Gq = np.matmul(np.swapaxes(Z, 1, 2), RZ)
                quad_r = (np.einsum("sn,sn->", res, Rr)
                          - 2.0 * np.einsum("sn,snr,sr->", Rr, Z, Eb)
                          + np.einsum("srk,srk->", Gq, EbbT))
                return 0.5 * logdet + quad_r / (2.0 * sigma2)

            res_rho = optimize.minimize_scalar(neg_q_rho, bounds=(-0.99, 0.99),
                                               method="bounded",
                                               options={"xatol": 1e-7})
            rho_best = float(res_rho.x)
            if neg_q_rho(rho_best) <= neg_q_rho(spec_now.rho_y):
                corr = spec_now.with_rhos(rho_y=rho_best)
        new_params = ModelParams.make(
            beta1=beta1, beta2=beta2, sigma=math.sqrt(sigma2), D=D_new,
            alpha=alpha, lam=lam, knots=knots, corr=corr)
        ll = evaluator.loglik(new_params)
        state.params = new_params
        state.iteration = iteration
        state.loglik_trace.append(ll)
        if abs(ll - state.loglik_trace[-2]) < options.tol * (1.0 + abs(ll)):
            converged = True
            break
    params_hat = state.params
    telemetry = ClampTelemetry()
    loglik = evaluator.loglik(params_hat, telemetry)
    se = cov_free = None
    condition = math.nan
    messages = []
    if options.compute_se:
        def loglik_fn(vec):
            try:
                return evaluator.loglik(unpack(vec, layout))
            except NumericError:
                return -_PENALTY
        se, cov_free, condition, se_msgs = _standard_errors(
            loglik_fn, layout, pack(params_hat, layout))
        messages.extend(se_msgs)
    estimates = dict(zip(layout.natural_names(),
                         natural_values(params_hat, layout).tolist()))
    return FitResult(
        params_hat=params_hat, layout=layout, loglik=loglik,
        n_params=layout.n_free, converged=converged, iterations=state.iteration,
        clamp_events=telemetry.count, hessian_condition=condition,
        estimates=estimates, se=se, cov_free=cov_free, messages=tuple(messages),
        loglik_trace=tuple(state.loglik_trace))


# ---------------------------------------------------------------------------
# posterior of the random effects on a grid
# ---------------------------------------------------------------------------

def posterior_re_density(subject: SubjectRecord, params: ModelParams, grids):
    """Normalized posterior density f(b | t, delta, y) on a rectangular grid.

    grids is one 1-d array per random-effect dimension; the returned array has
    shape (len(g_1), ..., len(g_r)) and integrates to one by the trapezoid
    rule over the grid.
    """
    grids = [np.asarray(g, dtype=float) for g in grids]
    if len(grids) != params.r:
        raise UsageError("need one grid per random-effect dimension")
    ws = longitudinal_marginal(subject, params)
    mesh = np.meshgrid(*grids, indexing="ij")
    B = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    if subject.event == 1:
        surv = event_contribution(ws, params, B)
    else:
        surv = censored_contribution(ws, params, B)
    centered = B - ws.post_mean
    U = ws.post_chol.whiten(centered.T)
    log_prior_post = -0.5 * (params.r * LOG_2PI + ws.post_chol.logdet()
                             + np.sum(U * U, axis=0))
    log_dens = surv + log_prior_post
    log_dens -= np.max(log_dens)
    dens = np.exp(log_dens).reshape([len(g) for g in grids])
    total = dens
    for axis in reversed(range(len(grids))):
        total = np.trapezoid(total, grids[axis], axis=axis)
    if not total > 0.0:
        raise NumericError("posterior density vanished on the supplied grid",
                           subject_id=subject.id)
    return dens / total


# ---------------------------------------------------------------------------
# replication-study aggregation
# ---------------------------------------------------------------------------

def aggregate_replications(results: Sequence[FitResult], truth: dict,
                           level: float = 0.95) -> list:
    """Est/SE/SD/RMSE/CP/ECP rows over replicate fits, one per parameter.

    CP counts coverage of the model-based normal interval est +/- z*SE, ECP of
    the interval using the empirical SD across replicates; both against the
    true value where one is supplied.
    """
    if not results:
        return []
    z = stats.norm.ppf(0.5 + level / 2.0)
    names = results[0].layout.natural_names()
    rows = []
    for name in names:
        ests = np.array([r.estimates[name] for r in results])
        ses = np.array([r.se[name] if r.se else math.nan for r in results])
        sd = float(np.std(ests, ddof=1)) if len(ests) > 1 else 0.0
        row = {"param": name, "est": float(np.mean(ests)),
               "se": float(np.nanmean(ses)) if np.any(np.isfinite(ses)) else math.nan,
               "sd": sd, "n_reps": len(ests)}
        if name in truth:
            tv = float(truth[name])
            row["truth"] = tv
            row["rmse"] = float(np.sqrt(np.mean((ests - tv) ** 2)))
            with np.errstate(invalid="ignore"):
                covered = np.abs(ests - tv) <= z * ses
            ok = np.isfinite(ses)
            row["cp"] = float(np.mean(covered[ok])) if ok.any() else math.nan
            row["ecp"] = float(np.mean(np.abs(ests - tv) <= z * sd)) if sd > 0 else math.nan
        rows.append(row)
    return rows
