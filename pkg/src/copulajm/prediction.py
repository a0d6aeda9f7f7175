"""Dynamic subject-specific survival prediction and accuracy metrics.

Given a subject known to be event-free at time t with biomarker history up to
t, the predicted probability of surviving past u > t is approximated to first
order by plugging in the empirical Bayes mode b_hat of

    f(b | T* > t, Y(t), w) propto S(t | Y(t), b) f(b | Y(t)),

where the copula-adjusted conditional survival is

    S(u | Y(t), b) = Phi( (Phi^{-1}(S(u | b)) + mu) / sigma_c ),

so pi_hat(u | t) is a ratio of two such terms. The cross-correlation row (and
hence mu, sigma_c) is determined by the observed measurement schedule and does
not change with the horizon u: the event coordinate of the copula is a single
latent variable, which also makes pi_hat(u | t) nonincreasing in u by
construction. With a zero cross block the ratio collapses to
exp(-integral_t^u h), the conventional formula.

Confidence bands follow the Monte Carlo scheme: draw theta from the normal
approximation on the unconstrained scale, draw b from its conditional law by a
short Metropolis run, recompute the curve, and take pointwise percentiles.

The AUC(u|t) / PE(u|t) estimators handle censoring by model-based weighting
(version "model-v1"): a subject censored inside the window enters as a case
with weight 1 - pi(u | T_cens) and as a control with the complementary
weight, using its own predicted probability at the censoring time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import integrate, optimize, special

from . import hazard as hz
from .errors import NumericError, UsageError
from .estimation import FitResult
from .likelihood import censored_contribution, longitudinal_marginal
from .modelcore import DesignInfo, ModelParams, SubjectRecord, pack, unpack
from .statmath import LOG_2PI

AUC_PE_WEIGHTING = "model-v1"

_LOG_DENOM_FLOOR = math.log(1e-300)


@dataclass(frozen=True)
class PredictionCurve:
    """Survival-probability curve pi_hat(u | t) over a grid of horizons."""

    t_base: float
    grid: np.ndarray
    point: np.ndarray
    lower: Optional[np.ndarray]
    upper: Optional[np.ndarray]
    L: int
    b_hat: np.ndarray
    eb_fallback: bool = False

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        point = np.asarray(self.point, dtype=float)
        if np.any(point < -1e-12) or np.any(point > 1.0 + 1e-12):
            raise NumericError("predicted probabilities left [0, 1]")
        if np.any(np.diff(point) > 1e-12):
            raise NumericError("predicted survival curve is not nonincreasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "point", np.clip(point, 0.0, 1.0))


@dataclass(frozen=True)
class AccuracyReport:
    auc: float
    pe: float
    t: float
    u: float
    n_comparable_pairs: int
    auc_defined: bool
    weighting: str = AUC_PE_WEIGHTING


def _history_record(subject: SubjectRecord, t: float) -> SubjectRecord:
    """The subject as known at time t: measurements up to t, event-free at t."""
    hist = subject.history_up_to(t)
    return SubjectRecord(id=hist.id, times=hist.times, y=hist.y, x_rows=hist.x_rows,
                         z_rows=hist.z_rows, w=hist.w, obs_time=float(t), event=0)


def eb_mode(subject: SubjectRecord, params: ModelParams, t: float):
    """Mode of f(b | T* > t, Y(t), w); deterministic quasi-Newton from E(b|y).

    Returns (b_hat, used_fallback): on optimizer failure the posterior mean of
    b given y alone is returned with the fallback flag raised.
    """
    hist = _history_record(subject, t)
    ws = longitudinal_marginal(hist, params)

    def neg_log_target(b):
        surv = censored_contribution(ws, params, b)
        u = ws.post_chol.whiten(b - ws.post_mean)
        log_post = -0.5 * (params.r * LOG_2PI + ws.post_chol.logdet() + float(u @ u))
        val = surv + log_post
        return -val if np.isfinite(val) else 1e12

    res = optimize.minimize(neg_log_target, ws.post_mean, method="BFGS",
                            options={"maxiter": 200, "gtol": 1e-9})
    if np.all(np.isfinite(res.x)) and res.fun <= neg_log_target(ws.post_mean) + 1e-12:
        return res.x, False
    import warnings

    warnings.warn(f"EB mode search failed for subject {subject.id!r}; "
                  "falling back to the posterior mean")
    return ws.post_mean.copy(), True


def _log_adjusted_survival(ws, params: ModelParams, b, times):
    """log S(times | Y, b) through the copula adjustment, vectorized in times."""
    b = np.asarray(b, dtype=float)
    a0 = params.alpha[0]
    a1 = params.alpha[1] if params.r == 2 else 0.0
    const = float(ws.subject.w @ params.beta2) + a0 * b[0]
    slope = a1 * b[1] if params.r == 2 else 0.0
    H = hz.cum_hazard_raw(params.lam, params.knots, const, slope,
                          np.asarray(times, dtype=float))
    mu = ws.mu_base - float(ws.mu_coef @ b)
    with np.errstate(invalid="ignore"):
        z = special.ndtri_exp(np.minimum(-H, 0.0))
    return special.log_ndtr((z + mu) / ws.sigma_c)


def _curve(ws, params, b, t, grid):
    log_den = float(_log_adjusted_survival(ws, params, b, [t])[0])
    if log_den < _LOG_DENOM_FLOOR:
        raise NumericError("conditioning event numerically impossible "
                           f"(survival to t={t} below 1e-300)",
                           subject_id=ws.subject.id)
    log_num = _log_adjusted_survival(ws, params, b, grid)
    return np.exp(log_num - log_den)


def predict_survival(subject: SubjectRecord, params: ModelParams, t: float,
                     grid) -> PredictionCurve:
    """First-order predicted curve pi_hat(u | t) at the EB mode."""
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if np.any(grid < t - 1e-12):
        raise UsageError("prediction grid must not precede the conditioning time")
    hist = _history_record(subject, t)
    ws = longitudinal_marginal(hist, params)
    b_hat, fallback = eb_mode(subject, params, t)
    point = _curve(ws, params, b_hat, t, grid)
    return PredictionCurve(t_base=float(t), grid=grid, point=point,
                           lower=None, upper=None, L=0, b_hat=b_hat,
                           eb_fallback=fallback)


def _metropolis_b(ws, params, rng, n_steps: int = 50):
    """Short random-walk Metropolis targeting f(b | T* > t, Y(t))."""
    def log_target(b):
        u = ws.post_chol.whiten(b - ws.post_mean)
        return (censored_contribution(ws, params, b)
                - 0.5 * (params.r * LOG_2PI + ws.post_chol.logdet() + float(u @ u)))

    state = ws.post_mean.copy()
    lp = log_target(state)
    L = ws.post_chol.lower
    for _ in range(n_steps):
        prop = state + L @ rng.standard_normal(params.r)
        lp_prop = log_target(prop)
        if math.log(rng.random()) < lp_prop - lp:
            state, lp = prop, lp_prop
    return state


def predict_band(subject: SubjectRecord, fit: FitResult, t: float, grid,
                 L: int = 500, level: float = 0.95, seed: int = 0,
                 replicate_seeds: Optional[Sequence[int]] = None) -> PredictionCurve:
    """Monte Carlo percentile bands around the first-order prediction.

    Per replicate l: draw theta^(l) from N(theta_hat, cov) on the unconstrained
    scale, draw b^(l) from its conditional law by a 50-step Metropolis run
    seeded from a per-replicate substream, recompute the curve. Replicate
    substreams derive from (seed, l), or from `replicate_seeds` when given, so
    bands are reproducible and parallelizable.
    """
    if fit.cov_free is None:
        raise UsageError("fit carries no parameter covariance; bands unavailable")
    if L < 2:
        raise UsageError("need at least 2 Monte Carlo draws for a band")
    if not 0.0 < level < 1.0:
        raise UsageError("level must be in (0, 1)")
    try:
        cov_chol = np.linalg.cholesky(fit.cov_free)
    except np.linalg.LinAlgError:
        raise UsageError("parameter covariance is not positive definite") from None
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    base = predict_survival(subject, fit.params_hat, t, grid)
    x_hat = pack(fit.params_hat, fit.layout)
    draws = np.empty((L, grid.shape[0]))
    for l in range(L):
        if replicate_seeds is not None:
            rng = np.random.default_rng(int(replicate_seeds[l]))
        else:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, l)))
        for _attempt in range(100):
            theta = x_hat + cov_chol @ rng.standard_normal(x_hat.shape[0])
            try:
                params_l = unpack(theta, fit.layout)
                hist = _history_record(subject, t)
                ws_l = longitudinal_marginal(hist, params_l)
                b_l = _metropolis_b(ws_l, params_l, rng)
                draws[l] = _curve(ws_l, params_l, b_l, t, grid)
                break
            except NumericError:
                continue  # infeasible draw (non-PD assembly); redraw
        else:
            raise NumericError("could not obtain a feasible parameter draw",
                               subject_id=subject.id)
    tail = 100.0 * (1.0 - level) / 2.0
    lower = np.percentile(draws, tail, axis=0)
    upper = np.percentile(draws, 100.0 - tail, axis=0)
    return PredictionCurve(t_base=float(t), grid=grid, point=base.point,
                           lower=lower, upper=upper, L=L, b_hat=base.b_hat,
                           eb_fallback=base.eb_fallback)


def mean_survival_time(subject: SubjectRecord, params: ModelParams, t: float,
                       plateau_eps: float = 1e-6) -> float:
    """t + integral_t^inf pi_hat(u | t) du, or +inf when the curve plateaus.

    The integral is accumulated by adaptive quadrature over the baseline knots
    and geometrically extended segments; if pi_hat still exceeds `plateau_eps`
    at 50x the last knot (possible when the random slope drives the hazard to
    zero), the expected event time does not exist and +inf is returned.
    """
    hist = _history_record(subject, t)
    ws = longitudinal_marginal(hist, params)
    b_hat, _ = eb_mode(subject, params, t)
    v_last = float(params.knots[-1])
    horizon = 50.0 * v_last
    if float(_curve(ws, params, b_hat, t, [horizon])[0]) > plateau_eps:
        return math.inf

    def pi_of(u):
        return _curve(ws, params, b_hat, t, np.atleast_1d(u))

    breaks = [float(v) for v in params.knots if t < v < horizon]
    seg = sorted({t, *breaks})
    edge = seg[-1] if seg[-1] > t else t
    while edge < horizon:
        edge = min(max(2.0 * max(edge, v_last), edge + v_last), horizon)
        seg.append(edge)
    total = 0.0
    for a, b_end in zip(seg, seg[1:]):
        piece, _ = integrate.quad(lambda u: float(pi_of(u)[0]), a, b_end, limit=200)
        total += piece
        if piece < 1e-12 and float(pi_of(b_end)[0]) < 1e-9:
            break
    return t + total


def fitted_trajectory(subject: SubjectRecord, params: ModelParams, t: float,
                      grid, design: DesignInfo, baselines: Mapping,
                      b_hat: Optional[np.ndarray] = None) -> np.ndarray:
    """Subject-level longitudinal fit x(u)'beta1 + z(u)'b_hat over the grid."""
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if b_hat is None:
        b_hat, _ = eb_mode(subject, params, t)
    X = design.x_at(baselines, grid)
    Z = design.z_at(grid)
    return X @ params.beta1 + Z @ np.asarray(b_hat, dtype=float)


# ---------------------------------------------------------------------------
# accuracy metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowPrediction:
    """One subject's ingredients for the (t, u] window metrics."""

    id: str
    pi: float               # pi_hat(u | t)
    obs_time: float
    event: int
    pi_at_censor: Optional[float] = None  # pi_hat(u | T_cens) if censored in window


def window_predictions(subjects: Sequence[SubjectRecord], params: ModelParams,
                       t: float, u: float) -> list:
    """Predictions for every subject at risk at t, with censoring weights."""
    out = []
    for s in subjects:
        if not s.obs_time > t:
            continue
        pi = float(predict_survival(s, params, t, [u]).point[0])
        pi_cens = None
        if s.event == 0 and t < s.obs_time < u:
            pi_cens = float(predict_survival(s, params, s.obs_time, [u]).point[0])
        out.append(WindowPrediction(id=s.id, pi=pi, obs_time=s.obs_time,
                                    event=s.event, pi_at_censor=pi_cens))
    return out


def evaluate_auc_pe(predictions: Sequence[WindowPrediction], t: float,
                    u: float) -> AccuracyReport:
    """Window-specific discrimination and Brier-type calibration.

    Case weight: 1 for an observed event in (t, u]; 1 - pi(u | T_cens) for a
    subject censored inside the window; 0 otherwise. Control weight: 1 when
    event-free at u; pi(u | T_cens) when censored inside the window. Ties in
    pi count one half. PE mixes both outcomes for censored-in-window subjects
    with the same weights.
    """
    if u <= t:
        raise UsageError("need u > t for a prediction window")
    preds = list(predictions)
    n = len(preds)
    case_w = np.zeros(n)
    ctrl_w = np.zeros(n)
    pi = np.array([p.pi for p in preds])
    for i, p in enumerate(preds):
        if p.event == 1 and t < p.obs_time <= u:
            case_w[i] = 1.0
        elif p.event == 0 and t < p.obs_time < u:
            if p.pi_at_censor is None:
                raise UsageError(f"subject {p.id!r} censored in window needs pi_at_censor")
            case_w[i] = 1.0 - p.pi_at_censor
            ctrl_w[i] = p.pi_at_censor
        if p.obs_time >= u:
            ctrl_w[i] = 1.0
    pair_w = np.outer(case_w, ctrl_w)
    np.fill_diagonal(pair_w, 0.0)
    total_w = float(pair_w.sum())
    n_pairs = int(np.count_nonzero(pair_w))
    if total_w <= 0.0:
        auc, defined = math.nan, False
    else:
        less = (pi[:, None] < pi[None, :]).astype(float)
        ties = 0.5 * (pi[:, None] == pi[None, :])
        auc = float(np.sum(pair_w * (less + ties)) / total_w)
        defined = True
    # prediction error over everyone at risk at t
    pe_terms = []
    for i, p in enumerate(preds):
        if p.obs_time >= u or (p.event == 1 and p.obs_time > u):
            pe_terms.append((1.0 - pi[i]) ** 2)
        elif p.event == 1:
            pe_terms.append(pi[i] ** 2)
        else:
            nu = 1.0 - p.pi_at_censor
            pe_terms.append(nu * pi[i] ** 2 + (1.0 - nu) * (1.0 - pi[i]) ** 2)
    pe = float(np.mean(pe_terms)) if pe_terms else math.nan
    return AccuracyReport(auc=auc, pe=pe, t=float(t), u=float(u),
                          n_comparable_pairs=n_pairs, auc_defined=defined)
