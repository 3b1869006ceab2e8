"""Streaming peak-over-threshold anomaly thresholding.

Calibration picks an initial threshold h as a high empirical quantile of a
batch of scores, fits a generalized Pareto distribution to the excesses above
h by maximum likelihood (Grimshaw's one-dimensional reduction), and derives an
extreme quantile z_q as the anomaly threshold. While streaming, scores above
z_q are anomalies and never touch the fit; scores in (h, z_q] are peaks that
extend the excess set and refresh the fit and threshold; everything else only
advances the observation counter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

GAMMA_ZERO = 1e-8

NORMAL = "normal"
PEAK = "peak"
ANOMALY = "anomaly"


class SpotDomainError(ValueError):
    """Raised on arguments outside the GPD/quantile domain."""


class CalibrationWarning(UserWarning):
    """Degenerate or thin-tailed calibration input."""


@dataclass
class GpdFit:
    """Fitted tail: shape gamma_hat, scale sigma_hat (> 0), excess count."""

    gamma_hat: float
    sigma_hat: float
    n_excesses: int


def gpd_log_likelihood(gamma: float, sigma: float, excesses) -> float:
    """Log-likelihood of positive excesses under GPD(gamma, sigma).

    Uses the exponential-limit form when |gamma| is below GAMMA_ZERO. Raises
    SpotDomainError instead of returning NaN for infeasible arguments.
    """
    y = np.asarray(excesses, dtype=np.float64)
    if y.size == 0:
        raise SpotDomainError("no excesses")
    if sigma <= 0:
        raise SpotDomainError(f"sigma must be positive, got {sigma}")
    if np.any(y <= 0):
        raise SpotDomainError("excesses must be positive")
    if abs(gamma) < GAMMA_ZERO:
        return float(-y.size * math.log(sigma) - y.sum() / sigma)
    z = 1.0 + (gamma / sigma) * y
    if np.any(z <= 0):
        raise SpotDomainError("1 + (gamma/sigma)*y must stay positive")
    return float(-y.size * math.log(sigma) - (1.0 + 1.0 / gamma) * np.log(z).sum())


def _grimshaw_w(theta: float, y: np.ndarray) -> float:
    """u(theta)*v(theta) - 1; its roots are the candidate MLE critical points."""
    z = 1.0 + theta * y
    u = np.mean(1.0 / z)
    v = 1.0 + np.mean(np.log(z))
    return u * v - 1.0


def grimshaw_fit(excesses, brackets: int = 20, theta_tol: float = 1e-10) -> GpdFit:
    """Maximum-likelihood GPD fit via the one-dimensional reduction.

    The two-parameter problem is reduced to finding roots of u(theta)*v(theta)=1
    in theta = gamma/sigma; each root maps back through gamma = v(theta)-1,
    sigma = gamma/theta. theta = 0 (the exponential solution gamma=0,
    sigma=mean) is always a candidate; the candidate with the highest
    log-likelihood wins.
    """
    y = np.asarray(excesses, dtype=np.float64)
    if y.size < 2:
        raise SpotDomainError("need at least two excesses to fit")
    if np.any(y <= 0):
        raise SpotDomainError("excesses must be positive")

    y_max = float(y.max())
    y_mean = float(y.mean())
    best_gamma, best_sigma = 0.0, y_mean
    if np.ptp(y) == 0.0:
        # all-equal excesses: the reduction is degenerate
        return GpdFit(best_gamma, best_sigma, int(y.size))
    best_ll = gpd_log_likelihood(best_gamma, best_sigma, y)

    lo = -1.0 / y_max + 1e-8
    if lo >= 0.0:
        lo = -0.5 / y_max
    hi = 10.0 / y_mean
    dead_zone = 1e-7 / y_mean  # skip the trivial double root at theta = 0
    edges = np.linspace(lo, hi, brackets + 1)

    roots: list[float] = []
    for a, b in zip(edges[:-1], edges[1:]):
        spans = [(a, b)]
        if a < 0.0 < b:
            spans = [(a, -dead_zone), (dead_zone, b)]
        for s_lo, s_hi in spans:
            if s_lo >= s_hi:
                continue
            w_lo, w_hi = _grimshaw_w(s_lo, y), _grimshaw_w(s_hi, y)
            if w_lo == 0.0:
                roots.append(s_lo)
            elif w_lo * w_hi < 0.0:
                roots.append(float(brentq(_grimshaw_w, s_lo, s_hi, args=(y,), xtol=theta_tol)))

    for theta in roots:
        if abs(theta) < dead_zone:
            continue
        gamma = float(np.mean(np.log1p(theta * y)))
        sigma = gamma / theta
        if sigma <= 0 or abs(gamma) < GAMMA_ZERO:
            continue
        try:
            ll = gpd_log_likelihood(gamma, sigma, y)
        except SpotDomainError:
            continue
        if ll > best_ll:
            best_gamma, best_sigma, best_ll = gamma, sigma, ll

    return GpdFit(best_gamma, best_sigma, int(y.size))


def gpd_quantile(h: float, fit: GpdFit, q: float, n: int) -> float:
    """Extreme quantile z_q implied by the fitted tail over threshold h.

    Requires 0 < q < N_h/n so the quantile lies above h.
    """
    if fit.n_excesses <= 0 or n < fit.n_excesses:
        raise SpotDomainError("need 0 < N_h <= n observations")
    if not (0.0 < q < fit.n_excesses / n):
        raise SpotDomainError(f"q must lie in (0, N_h/n) = (0, {fit.n_excesses / n:g}), got {q}")
    r = q * n / fit.n_excesses
    if abs(fit.gamma_hat) < GAMMA_ZERO:
        return h + fit.sigma_hat * math.log(1.0 / r)
    return h + (fit.sigma_hat / fit.gamma_hat) * (r**-fit.gamma_hat - 1.0)


# ---------------------------------------------------------------------------
# Streaming state
# ---------------------------------------------------------------------------


@dataclass
class SpotState:
    """Live thresholding state for one stream of scores."""

    q: float
    h: float
    z_q: float
    fit: GpdFit
    peaks: list[float] = field(default_factory=list)
    k: int = 0
    n_peaks_total: int = 0
    refit_stride: int = 1
    max_peaks: int | None = None
    degenerate: bool = False
    _since_refit: int = 0


def _initial_threshold(scores: np.ndarray, init_level: float, min_peaks: int) -> tuple[float, bool]:
    """Empirical init_level-quantile, lowered if needed to yield >= min_peaks excesses."""
    n = scores.size
    s = np.sort(scores)
    idx = math.ceil(init_level * n) - 1
    idx = min(max(idx, 0), n - 1)
    h = float(s[idx])
    if np.count_nonzero(scores > h) >= min_peaks:
        return h, False
    # walk the order statistics down until enough strict excesses exist
    idx = min(idx, n - min_peaks - 1)
    while idx >= 0 and np.count_nonzero(scores > s[idx]) < min_peaks:
        idx -= 1
    if idx < 0:
        return float(s[-1]), True  # constant (or near-constant) scores
    warnings.warn(
        f"initial threshold lowered to the {(idx + 1) / n:.3f} quantile to collect {min_peaks} peaks",
        CalibrationWarning,
        stacklevel=3,
    )
    return float(s[idx]), False


def pot_calibrate(
    scores,
    q: float = 1e-4,
    init_level: float = 0.98,
    min_peaks: int = 10,
    refit_stride: int = 1,
    max_peaks: int | None = None,
) -> SpotState:
    """Fit the initial threshold pair (h, z_q) from a batch of calibration scores."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size < 100:
        raise ValueError(f"need at least 100 calibration scores, got {x.size}")
    if not (0.0 < q < 1.0):
        raise ValueError("q must lie in (0, 1)")
    if not np.all(np.isfinite(x)):
        raise ValueError("calibration scores must be finite")

    h, degenerate = _initial_threshold(x, init_level, min_peaks)
    n = int(x.size)
    if degenerate:
        margin = max(1e-9, 1e-6 * abs(h))
        warnings.warn("constant calibration scores; using h + tiny margin", CalibrationWarning, stacklevel=2)
        state = SpotState(
            q=q,
            h=h,
            z_q=h + margin,
            fit=GpdFit(0.0, margin, 0),
            k=n,
            refit_stride=refit_stride,
            max_peaks=max_peaks,
            degenerate=True,
        )
        return state

    peaks = [float(v - h) for v in x[x > h]]
    fit = grimshaw_fit(peaks)
    z_q = gpd_quantile(h, fit, q, n)
    return SpotState(
        q=q,
        h=h,
        z_q=z_q,
        fit=fit,
        peaks=peaks,
        k=n,
        n_peaks_total=len(peaks),
        refit_stride=refit_stride,
        max_peaks=max_peaks,
    )


def spot_step(state: SpotState, x: float) -> str:
    """Classify one score and update the state per the streaming PoT rules.

    Anomalies (x > z_q) leave the state untouched; peaks (h < x <= z_q) extend
    the excess set, refresh the fit (every `refit_stride` peaks) and recompute
    z_q; normal points only advance k.
    """
    if x > state.z_q:
        return ANOMALY
    if x > state.h:
        state.peaks.append(float(x - state.h))
        if state.max_peaks is not None and len(state.peaks) > state.max_peaks:
            del state.peaks[: len(state.peaks) - state.max_peaks]
        state.n_peaks_total += 1
        state.k += 1
        state._since_refit += 1
        if state._since_refit >= state.refit_stride or state.fit.n_excesses < 2:
            if len(state.peaks) >= 2:
                fitted = grimshaw_fit(state.peaks)
                state.fit = GpdFit(fitted.gamma_hat, fitted.sigma_hat, state.n_peaks_total)
                state.degenerate = False
            state._since_refit = 0
        else:
            state.fit = GpdFit(state.fit.gamma_hat, state.fit.sigma_hat, state.n_peaks_total)
        # recompute only while q stays in the quantile's domain; otherwise the
        # previous threshold is kept rather than crashing mid-stream
        if not state.degenerate and 0.0 < state.q < state.fit.n_excesses / state.k:
            state.z_q = gpd_quantile(state.h, state.fit, state.q, state.k)
        return PEAK
    state.k += 1
    return NORMAL
