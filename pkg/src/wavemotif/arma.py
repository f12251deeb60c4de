"""ARMA(p, q) fitting by two-stage least squares and one-step-ahead forecasting.

The model is ``x_t = c + e_t + sum_i phi_i x_{t-i} + sum_i lam_i e_{t-i}``
with ``e_t`` white noise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

log = logging.getLogger(__name__)

ROOT_MARGIN = 1e-6


class ArmaError(ValueError):
    pass


@dataclass(frozen=True)
class ArmaModel:
    intercept: float
    ar_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ma_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    noise_variance: float = 0.0
    # Set when a fitted AR or MA polynomial had roots inside the unit circle
    # and they were reflected.
    repaired: bool = False
    # Set for the mean-only fallback on constant input.
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ar_coeffs", np.atleast_1d(np.asarray(self.ar_coeffs, dtype=float)))
        object.__setattr__(self, "ma_coeffs", np.atleast_1d(np.asarray(self.ma_coeffs, dtype=float)))
        if self.noise_variance < 0:
            raise ArmaError("noise_variance must be non-negative")

    @property
    def p(self) -> int:
        return len(self.ar_coeffs)

    @property
    def q(self) -> int:
        return len(self.ma_coeffs)

    def is_stationary(self, margin: float = ROOT_MARGIN) -> bool:
        return _roots_outside(np.r_[1.0, -self.ar_coeffs], margin)

    def to_record(self, segment_id=None, band=None) -> dict:
        return {
            "segment_id": segment_id,
            "band": band,
            "p": self.p,
            "q": self.q,
            "c": float(self.intercept),
            "phi": self.ar_coeffs.tolist(),
            "lambda": self.ma_coeffs.tolist(),
            "noise_variance": float(self.noise_variance),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ArmaModel":
        return cls(rec["c"], rec["phi"], rec["lambda"], rec["noise_variance"])


def write_models(records, path) -> None:
    """One JSON object per line, as produced by :meth:`ArmaModel.to_record`."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _roots_outside(poly_low_first: np.ndarray, margin: float) -> bool:
    poly = np.trim_zeros(poly_low_first, "b")
    if len(poly) <= 1:
        return True
    roots = np.roots(poly[::-1])
    return bool(np.all(np.abs(roots) > 1 + margin))


def _reflect(poly_low_first: np.ndarray, margin: float = ROOT_MARGIN) -> np.ndarray:
    """Move roots of ``poly[0] + poly[1] z + ...`` to outside the unit circle."""
    poly = np.asarray(poly_low_first, dtype=float)
    roots = np.roots(poly[::-1])
    fixed = []
    for r in roots:
        mag = abs(r)
        if mag < 1:
            r = 1 / np.conj(r)
            mag = abs(r)
        if mag <= 1 + margin:
            r = r * (1 + 10 * margin) / mag
        fixed.append(r)
    # Rebuild with constant term 1: prod (1 - z / r).
    out = np.poly1d([1.0])
    for r in fixed:
        out = out * np.poly1d([-1 / r, 1.0])
    coeffs = np.real(out.c[::-1])
    return coeffs / coeffs[0]


def _lag_matrix(x: np.ndarray, lags: int, start: int) -> np.ndarray:
    n = len(x)
    return np.column_stack([x[start - i:n - i] for i in range(1, lags + 1)]) if lags else np.empty((n - start, 0))


def long_ar_order(n: int) -> int:
    return max(1, min(20, n // 10))


def fit_arma(series, p: int, q: int) -> ArmaModel:
    """Hannan-Rissanen estimate of an ARMA(p, q) model.

    Stage one fits a long autoregression by least squares and keeps its
    residuals as innovation estimates; stage two regresses the series on a
    constant, its own ``p`` lags and ``q`` lags of those innovations. The noise
    variance is the mean squared stage-two residual. Non-stationary AR or
    non-invertible MA estimates are repaired by root reflection.

    A constant series yields a mean-only model with ``degenerate=True``.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ArmaError("series must be 1-D")
    if p < 0 or q < 0 or p + q < 1:
        raise ArmaError(f"need p, q >= 0 and p + q >= 1, got ({p}, {q})")
    n = len(x)
    if n < 10 * (p + q + 1):
        raise ArmaError(f"series of length {n} too short for ARMA({p},{q}); need {10 * (p + q + 1)}")
    if not np.isfinite(x).all():
        raise ArmaError("series contains non-finite values")
    if np.ptp(x) == 0:
        log.warning("constant series; falling back to mean-only model")
        return ArmaModel(float(x[0]), noise_variance=0.0, degenerate=True)

    if q > 0:
        m = max(long_ar_order(n), p, q)
        design = np.column_stack([np.ones(n - m), _lag_matrix(x, m, m)])
        beta, *_ = np.linalg.lstsq(design, x[m:], rcond=None)
        innov = np.zeros(n)
        innov[m:] = x[m:] - design @ beta
        start = m + q
    else:
        innov = np.zeros(n)
        start = p
    start = max(start, p)
    cols = [np.ones(n - start)]
    if p:
        cols.append(_lag_matrix(x, p, start))
    if q:
        cols.append(_lag_matrix(innov, q, start))
    design = np.column_stack(cols)
    beta, *_ = np.linalg.lstsq(design, x[start:], rcond=None)
    resid = x[start:] - design @ beta
    c, phi, lam = float(beta[0]), beta[1:1 + p], beta[1 + p:]

    repaired = False
    if p and not _roots_outside(np.r_[1.0, -phi], ROOT_MARGIN):
        phi = -_reflect(np.r_[1.0, -phi])[1:]
        c = float(x.mean() * (1 - phi.sum()))
        repaired = True
    if q and not _roots_outside(np.r_[1.0, lam], ROOT_MARGIN):
        lam = _reflect(np.r_[1.0, lam])[1:]
        repaired = True
    if repaired:
        log.info("ARMA(%d,%d) fit repaired by root reflection", p, q)
    return ArmaModel(c, phi, lam, float(np.mean(resid ** 2)), repaired=repaired)


def residuals(model: ArmaModel, series) -> np.ndarray:
    """Innovation estimates for ``series`` under ``model``.

    Pre-sample innovations are taken as zero and the first ``p`` entries,
    which lack a full set of lags, are zero.
    """
    x = np.asarray(series, dtype=float)
    p = model.p
    u = x - model.intercept
    if p:
        ar_part = lfilter(np.r_[0.0, model.ar_coeffs], [1.0], x)
        u = u - ar_part
        u[:p] = 0.0
    if model.q:
        return lfilter([1.0], np.r_[1.0, model.ma_coeffs], u)
    return u


def forecast_one_step(model: ArmaModel, history, residual_history=()) -> float:
    """``c + sum phi_i x_{t-i} + sum lam_i e_{t-i}`` with the new innovation at its mean 0."""
    x = np.asarray(history, dtype=float)
    e = np.asarray(residual_history, dtype=float)
    if len(x) < model.p:
        raise ArmaError(f"need {model.p} past values, got {len(x)}")
    if len(e) < model.q:
        raise ArmaError(f"need {model.q} past residuals, got {len(e)}")
    out = model.intercept
    if model.p:
        out += float(model.ar_coeffs @ x[::-1][:model.p])
    if model.q:
        out += float(model.ma_coeffs @ e[::-1][:model.q])
    return float(out)


def aic(model: ArmaModel, n: int) -> float:
    if model.noise_variance <= 0:
        return -np.inf
    return n * np.log(model.noise_variance) + 2 * (model.p + model.q + 1)


def select_orders(series, max_p: int = 3, max_q: int = 3) -> tuple[int, int]:
    """Grid-search (p, q) by AIC; ties go to smaller p + q, then smaller p."""
    if max_p < 1 or max_q < 1:
        raise ArmaError("max_p and max_q must be >= 1")
    x = np.asarray(series, dtype=float)
    best = None
    for p in range(max_p + 1):
        for q in range(max_q + 1):
            if p + q == 0:
                continue
            try:
                model = fit_arma(x, p, q)
            except ArmaError:
                continue
            key = (aic(model, len(x)), p + q, p)
            if best is None or key < best[0]:
                best = (key, (p, q))
    if best is None:
        log.warning("no admissible ARMA order could be fitted; using (1, 0)")
        return (1, 0)
    return best[1]


def fit_auto(series, max_p: int = 3, max_q: int = 3) -> ArmaModel:
    """Select orders by AIC and return the fitted model.

    Series too short for any candidate fall back to the mean-only model.
    """
    x = np.asarray(series, dtype=float)
    if np.ptp(x) == 0:
        return ArmaModel(float(x[0]), noise_variance=0.0, degenerate=True)
    p, q = select_orders(x, max_p, max_q)
    try:
        return fit_arma(x, p, q)
    except ArmaError:
        return ArmaModel(float(x.mean()), noise_variance=float(x.var()), degenerate=True)
