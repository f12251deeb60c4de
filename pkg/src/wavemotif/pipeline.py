"""End-to-end hybrid forecasting: wavelet bands, Motif-GCRNN on the low band,
per-segment ARMA on the high bands, recombination and scoring.

Time is indexed globally, ``tau = day * intervals_per_day + interval``. The
first ``train_days`` days are training data; nothing fitted reads later
samples. Band values fed to any model at target ``tau`` depend only on
samples before ``tau``; ``RunConfig.wavelet.policy`` picks how they are formed.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arma as arma_mod
from . import neural
from .config import RunConfig
from .data import SpeedMatrix
from .roadgraph import (DirectedRoadGraph, count_motif_participation, motif_laplacian,
                        rescale_laplacian, standard_laplacian)
from .wavelet import (BandComponents, WaveletError, band_components, causal_band_components,
                      filter_bank)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Decomposition


def decompose_all(values, level: int = 3, wavelet: str = "db4", mode: str = "periodic",
                  segment_ids=None) -> BandComponents:
    """Band components of every row of an ``(N, T)`` matrix.

    Returns ``BandComponents`` whose arrays are ``(N, T)``: one low band and
    ``level`` high bands.
    """
    x = np.asarray(getattr(values, "values", values), dtype=float)
    if segment_ids is None:
        segment_ids = getattr(values, "segment_ids", None) or [str(i) for i in range(x.shape[0])]
    bad = [segment_ids[i] for i in range(x.shape[0]) if not np.isfinite(x[i]).all()]
    if bad:
        raise StageError("decompose", f"non-finite samples in segments {bad}; impute first")
    try:
        return band_components(x, filter_bank(wavelet), level, mode)
    except WaveletError as exc:
        raise StageError("decompose", f"segments {list(segment_ids)}: {exc}") from None


# ---------------------------------------------------------------------------
# Windows


@dataclass
class WindowIndex:
    """Targets of one split. ``tau`` is the global index of the predicted interval."""

    tau: np.ndarray
    day: np.ndarray
    interval: np.ndarray

    def __len__(self):
        return len(self.tau)


@dataclass
class WindowSplit:
    train: WindowIndex
    test: WindowIndex
    trend_window: int
    period_window: int
    intervals_per_day: int


def build_windows(total_intervals: int, m: int, n: int, intervals_per_day: int,
                  train_days: int) -> WindowSplit:
    """Every target ``(d, t)`` with ``t >= m`` (recent frames stay inside day ``d``) and ``d >= n``.

    Training targets lie in days ``< train_days``, test targets in later days.
    """
    if m < 1 or n < 0:
        raise StageError("windows", f"need m >= 1 and n >= 0, got m={m}, n={n}")
    if total_intervals % intervals_per_day:
        raise StageError("windows", "series length is not a whole number of days")
    days = total_intervals // intervals_per_day
    if not 0 < train_days <= days:
        raise StageError("windows", f"train_days={train_days} outside 1..{days}")
    d, t = np.meshgrid(np.arange(days), np.arange(intervals_per_day), indexing="ij")
    d, t = d.ravel(), t.ravel()
    ok = (t >= m) & (d >= n)
    d, t = d[ok], t[ok]
    tau = d * intervals_per_day + t
    tr = d < train_days
    split = WindowSplit(WindowIndex(tau[tr], d[tr], t[tr]), WindowIndex(tau[~tr], d[~tr], t[~tr]),
                        m, n, intervals_per_day)
    if len(split.train) == 0:
        raise StageError("windows", f"no training windows: {train_days} training days cannot "
                                    f"supply m={m}, n={n} with {intervals_per_day} intervals/day")
    return split


def gather_frames(band: np.ndarray, tau, m: int, n: int, intervals_per_day: int):
    """Trend frames ``(S, m, N)`` at ``tau-m .. tau-1`` and period frames ``(S, n, N)``
    at ``tau - n*I .. tau - I``, oldest first."""
    tau = np.atleast_1d(np.asarray(tau))
    trend_idx = tau[:, None] + np.arange(-m, 0)[None, :]
    period_idx = tau[:, None] + intervals_per_day * np.arange(-n, 0)[None, :]
    trend = np.transpose(band[:, trend_idx], (1, 2, 0))
    period = np.transpose(band[:, period_idx], (1, 2, 0))
    return trend, period


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class EvaluationReport:
    mae: float
    mape_percent: float
    rmse: float
    sample_count: int
    per_segment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mape_percent": self.mape_percent, "rmse": self.rmse,
                "sample_count": self.sample_count, "per_segment": self.per_segment}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate(predictions, actuals, valid=None, eps_mape: float = 1.0, segment_ids=None) -> EvaluationReport:
    """MAE, MAPE (%) and RMSE over ``(segment, time)`` pairs where ``valid`` is true.

    Actuals below ``eps_mape`` are left out of MAPE only.
    """
    pred = np.asarray(predictions, dtype=float)
    act = np.asarray(actuals, dtype=float)
    if pred.shape != act.shape:
        raise StageError("evaluate", f"shape mismatch {pred.shape} vs {act.shape}")
    if pred.ndim == 1:
        pred, act = pred[None], act[None]
    valid = np.ones(pred.shape, dtype=bool) if valid is None else np.broadcast_to(np.asarray(valid, bool), pred.shape)
    if not valid.any():
        raise StageError("evaluate", "no valid points to score")
    err = pred - act
    mape_ok = valid & (act >= eps_mape)

    def metrics(e, ok, mok, a):
        mae = float(np.mean(np.abs(e[ok])))
        rmse = float(np.sqrt(np.mean(e[ok] ** 2)))
        mape = float(100.0 * np.mean(np.abs(e[mok]) / a[mok])) if mok.any() else float("nan")
        return mae, mape, rmse

    mae, mape, rmse = metrics(err, valid, mape_ok, act)
    ids = segment_ids if segment_ids is not None else [str(i) for i in range(pred.shape[0])]
    per_segment = {}
    for i, sid in enumerate(ids):
        if valid[i].any():
            m_i = metrics(err[i], valid[i], mape_ok[i], act[i])
            per_segment[str(sid)] = {"mae": m_i[0], "mape_percent": m_i[1], "rmse": m_i[2],
                                     "sample_count": int(valid[i].sum())}
    return EvaluationReport(mae, mape, rmse, int(valid.sum()), per_segment)


# ---------------------------------------------------------------------------
# Components


def build_laplacian(graph: DirectedRoadGraph, kind: str = "motif") -> np.ndarray:
    """Rescaled Laplacian used as the Chebyshev basis."""
    if kind == "motif":
        lap = motif_laplacian(count_motif_participation(graph), symmetrize=True)
    else:
        lap = standard_laplacian(graph)
    return rescale_laplacian(lap).matrix


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.training.dtype == "float32" else np.float64


def train_network(series_train: np.ndarray, graph: DirectedRoadGraph, cfg: RunConfig,
                  split: WindowSplit, layers: int | None = None, zero_init: bool = False):
    """Fit a Motif-GCRNN to predict ``series_train[:, tau]`` from its windows.

    ``series_train`` covers only the training days. Returns the trained model
    and its per-epoch loss history.
    """
    mc, tc = cfg.model, cfg.training
    scaler = neural.MinMaxScaler.fit(series_train)
    model = neural.init_model(
        build_laplacian(graph, mc.laplacian), mc.trend_window, mc.period_window, order=mc.order,
        filters=mc.filters, hidden=mc.hidden, layers=mc.layers if layers is None else layers,
        seed=tc.seed, scaler=scaler, zero=zero_init, dtype=_dtype(cfg))
    trend, period = gather_frames(series_train, split.train.tau, mc.trend_window, mc.period_window,
                                  split.intervals_per_day)
    target = series_train[:, split.train.tau].T
    data = neural.Batch(scaler.transform(trend), scaler.transform(period) if mc.period_window else None,
                        scaler.transform(target))
    result = neural.train(model, data, neural.TrainConfig(tc.learning_rate, tc.epochs, tc.batch_size,
                                                          tc.seed, tc.gradient_clip))
    return result.model, result.loss_history


def fit_band_models(highs, cfg: RunConfig) -> list[list[arma_mod.ArmaModel]]:
    """One ARMA per (band, segment), orders chosen by AIC."""
    models = []
    for band in highs:
        models.append([arma_mod.fit_auto(row, cfg.arma.max_p, cfg.arma.max_q) for row in band])
    return models


def arma_forecast(model: arma_mod.ArmaModel, history: np.ndarray, window: int) -> float:
    """One-step forecast; innovations are re-estimated over the trailing ``window`` samples."""
    tail = history[-window:]
    resid = arma_mod.residuals(model, tail) if model.q else ()
    return arma_mod.forecast_one_step(model, tail, resid)


# ---------------------------------------------------------------------------
# Hybrid run


@dataclass
class RunResult:
    report: EvaluationReport
    predictions: np.ndarray  # (N, S_test)
    actuals: np.ndarray
    split: WindowSplit
    loss_history: list = field(default_factory=list)
    model: neural.MotifGcrnnModel | None = None
    arma_models: list = field(default_factory=list)
    segment_ids: list = field(default_factory=list)

    def write_predictions(self, path) -> None:
        write_predictions(path, self.segment_ids, self.split.test, self.predictions, self.actuals)


def write_predictions(path, segment_ids, index: WindowIndex, predictions, actuals) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "day", "interval", "predicted_speed", "actual_speed"])
        for i, sid in enumerate(segment_ids):
            for k in range(len(index)):
                w.writerow([sid, int(index.day[k]), int(index.interval[k]),
                            repr(float(predictions[i, k])), repr(float(actuals[i, k]))])


def _prepare(speeds: SpeedMatrix, graph: DirectedRoadGraph | None, cfg: RunConfig):
    x = speeds.values
    if graph is not None and graph.node_count != x.shape[0]:
        raise StageError("setup", f"graph has {graph.node_count} nodes but the matrix has {x.shape[0]} segments")
    if not np.isfinite(x).all():
        raise StageError("setup", "speed matrix has gaps; run impute first")
    split = build_windows(x.shape[1], cfg.model.trend_window, cfg.model.period_window,
                          speeds.intervals_per_day, cfg.split.train_days)
    if len(split.test) == 0:
        raise StageError("windows", "no test targets after the training days")
    return x, split


def _score(speeds: SpeedMatrix, split: WindowSplit, pred: np.ndarray, cfg: RunConfig):
    actual = speeds.values[:, split.test.tau]
    valid = ~speeds.missing_mask[:, split.test.tau]
    report = evaluate(pred, actual, valid, cfg.metrics.eps_mape, speeds.segment_ids)
    return report, actual


def training_bands(x_train: np.ndarray, cfg: RunConfig, segment_ids=None) -> BandComponents:
    """Bands used for fitting, computed from the training days alone."""
    wc = cfg.wavelet
    if wc.policy == "split":
        return decompose_all(x_train, wc.level, wc.name, wc.mode, segment_ids)
    return causal_bands(x_train, cfg, segment_ids)


def causal_bands(x: np.ndarray, cfg: RunConfig, segment_ids=None) -> BandComponents:
    """Trailing-window bands: the value at ``t`` depends only on samples up to ``t``."""
    wc = cfg.wavelet
    try:
        return causal_band_components(x, wc.window, filter_bank(wc.name), wc.level, wc.mode)
    except WaveletError as exc:
        raise StageError("decompose", f"segments {list(segment_ids or [])}: {exc}") from None


def _split_policy_inputs(x, split, cfg, arma_models):
    """Test inputs under the split policy: decompose ``x[:, :tau]`` afresh for every target."""
    mc = cfg.model
    n_seg, n_test = x.shape[0], len(split.test)
    trend = np.zeros((n_test, mc.trend_window, n_seg))
    period = np.zeros((n_test, mc.period_window, n_seg))
    high_fc = np.zeros((n_seg, n_test))
    for k, tau in enumerate(split.test.tau):
        bands = band_components(x[:, :tau], filter_bank(cfg.wavelet.name), cfg.wavelet.level,
                                cfg.wavelet.mode)
        tr, pe = gather_frames(bands.low_frequency, [tau], mc.trend_window, mc.period_window,
                               split.intervals_per_day)
        trend[k], period[k] = tr[0], pe[0]
        for b, band in enumerate(bands.high_frequency):
            for i in range(n_seg):
                high_fc[i, k] += arma_forecast(arma_models[b][i], band[i], cfg.arma.residual_window)
    return trend, period, high_fc


def _causal_policy_inputs(x, split, cfg, arma_models):
    mc = cfg.model
    bands = causal_bands(x, cfg)
    trend, period = gather_frames(bands.low_frequency, split.test.tau, mc.trend_window,
                                  mc.period_window, split.intervals_per_day)
    high_fc = np.zeros((x.shape[0], len(split.test)))
    for b, band in enumerate(bands.high_frequency):
        for i in range(x.shape[0]):
            high_fc[i] += rolling_forecasts(arma_models[b][i], band[i], split.test.tau,
                                            cfg.arma.residual_window)
    return trend, period, high_fc


def rolling_forecasts(model: arma_mod.ArmaModel, series: np.ndarray, targets, window: int) -> np.ndarray:
    """One-step forecasts of ``series[tau]`` from ``series[:tau]`` for each target, without refitting."""
    return np.array([arma_forecast(model, series[:tau], window) for tau in targets])


@dataclass
class FittedHybrid:
    """Everything fitted on the training days: the low-band network and the band ARMA models."""

    model: neural.MotifGcrnnModel
    arma_models: list  # [band][segment]
    loss_history: list = field(default_factory=list)

    def arma_records(self, segment_ids) -> list[dict]:
        return [m.to_record(segment_id=sid, band=f"D{b + 1}")
                for b, row in enumerate(self.arma_models) for sid, m in zip(segment_ids, row)]

    @staticmethod
    def arma_from_records(records, segment_ids, level: int) -> list:
        index = {(r["band"], str(r["segment_id"])): r for r in records}
        try:
            return [[arma_mod.ArmaModel.from_record(index[(f"D{b + 1}", str(sid))]) for sid in segment_ids]
                    for b in range(level)]
        except KeyError as exc:
            raise StageError("predict", f"no ARMA model for band/segment {exc.args[0]}") from None


def fit_hybrid(speeds: SpeedMatrix, graph: DirectedRoadGraph, cfg: RunConfig,
               zero_init: bool = False) -> FittedHybrid:
    """Train the low-band network and fit one ARMA per (high band, segment) on the training days."""
    x, split = _prepare(speeds, graph, cfg)
    t_train = cfg.split.train_days * speeds.intervals_per_day
    train_bands = training_bands(x[:, :t_train], cfg, speeds.segment_ids)
    try:
        model, history = train_network(train_bands.low_frequency, graph, cfg, split, zero_init=zero_init)
    except (neural.TrainingDiverged, neural.ShapeError) as exc:
        raise StageError("train", str(exc)) from None
    # The first window of causal bands sees left padding rather than data.
    skip = cfg.wavelet.window - 1 if cfg.wavelet.policy == "causal" else 0
    try:
        arma_models = fit_band_models([h[:, skip:] for h in train_bands.high_frequency], cfg)
    except arma_mod.ArmaError as exc:
        raise StageError("arma", str(exc)) from None
    return FittedHybrid(model, arma_models, history)


def forecast_hybrid(fitted: FittedHybrid, speeds: SpeedMatrix, cfg: RunConfig) -> RunResult:
    """Low-band network forecast plus every high-band ARMA forecast, scored on the test days."""
    x, split = _prepare(speeds, None, cfg)
    if fitted.model.node_count != x.shape[0]:
        raise StageError("predict", f"model has {fitted.model.node_count} nodes, matrix has {x.shape[0]} segments")
    if len(fitted.arma_models) != cfg.wavelet.level:
        raise StageError("predict", f"{len(fitted.arma_models)} ARMA bands for level {cfg.wavelet.level}")
    mc = cfg.model
    inputs = _split_policy_inputs if cfg.wavelet.policy == "split" else _causal_policy_inputs
    trend, period, high_fc = inputs(x, split, cfg, fitted.arma_models)
    try:
        low_fc = neural.predict(fitted.model, trend, period if mc.period_window else None).T
    except (neural.TrainingDiverged, neural.ShapeError) as exc:
        raise StageError("predict", str(exc)) from None
    pred = low_fc + high_fc
    if not np.isfinite(pred).all():
        raise StageError("predict", "non-finite forecasts")
    report, actual = _score(speeds, split, pred, cfg)
    return RunResult(report, pred, actual, split, fitted.loss_history, fitted.model, fitted.arma_models,
                     list(speeds.segment_ids))


def run_hybrid(speeds: SpeedMatrix, graph: DirectedRoadGraph, cfg: RunConfig,
               zero_init: bool = False) -> RunResult:
    """Decompose, train on the low band, fit ARMA on high bands, forecast and score the test days."""
    return forecast_hybrid(fit_hybrid(speeds, graph, cfg, zero_init), speeds, cfg)


# ---------------------------------------------------------------------------
# Baselines

BASELINES = ("persistence", "historical_average", "lstm_only", "arma_only", "motif_gcrnn_no_dwt")


def run_baseline(speeds: SpeedMatrix, graph: DirectedRoadGraph | None, cfg: RunConfig, kind: str) -> RunResult:
    """Score a reference forecaster on the same test targets as :func:`run_hybrid`."""
    if kind not in BASELINES:
        raise StageError("baseline", f"unknown baseline {kind!r}; expected one of {BASELINES}")
    x, split = _prepare(speeds, graph, cfg)
    per_day = speeds.intervals_per_day
    t_train = cfg.split.train_days * per_day
    tau = split.test.tau
    history, model, arma_models = [], None, []
    if kind == "persistence":
        pred = x[:, tau - 1]
    elif kind == "historical_average":
        profile = x[:, :t_train].reshape(x.shape[0], cfg.split.train_days, per_day).mean(axis=1)
        pred = profile[:, split.test.interval]
    elif kind == "arma_only":
        arma_models = [arma_mod.fit_auto(row, cfg.arma.max_p, cfg.arma.max_q) for row in x[:, :t_train]]
        window = cfg.arma.residual_window
        pred = np.array([[arma_forecast(arma_models[i], x[i, :t], window) for t in tau]
                         for i in range(x.shape[0])])
    else:
        if graph is None and kind == "motif_gcrnn_no_dwt":
            raise StageError("baseline", "motif_gcrnn_no_dwt needs a graph")
        layers = 0 if kind == "lstm_only" else None
        lap_graph = graph if graph is not None else DirectedRoadGraph(x.shape[0], frozenset())
        try:
            model, history = train_network(x[:, :t_train], lap_graph, cfg, split, layers=layers)
        except neural.TrainingDiverged as exc:
            raise StageError("train", str(exc)) from None
        mc = cfg.model
        trend, period = gather_frames(x, tau, mc.trend_window, mc.period_window, per_day)
        pred = neural.predict(model, trend, period if mc.period_window else None).T
    report, actual = _score(speeds, split, pred, cfg)
    return RunResult(report, pred, actual, split, history, model, arma_models, list(speeds.segment_ids))


# ---------------------------------------------------------------------------
# Sweeps

SWEEP_AXES = {"K": ("model", "order"), "m": ("model", "trend_window"), "n": ("model", "period_window")}
SWEEP_DEFAULT_VALUES = {"K": [1, 2, 3, 4, 5], "m": list(range(1, 9)), "n": list(range(1, 9))}


def parameter_sweep(speeds: SpeedMatrix, graph: DirectedRoadGraph, cfg: RunConfig, axis: str,
                    values=None, on_row=None) -> list[dict]:
    """Re-run the hybrid once per value of ``axis`` (``K``, ``m`` or ``n``), everything else fixed."""
    import copy

    if axis not in SWEEP_AXES:
        raise StageError("sweep", f"unknown axis {axis!r}; expected K, m or n")
    values = list(SWEEP_DEFAULT_VALUES[axis] if values is None else values)
    sec, key = SWEEP_AXES[axis]
    rows = []
    for v in values:
        run_cfg = copy.deepcopy(cfg)
        setattr(getattr(run_cfg, sec), key, int(v))
        run_cfg.validate()
        rep = run_hybrid(speeds, graph, run_cfg).report
        row = {"axis": axis, "value": v, "mae": rep.mae, "mape": rep.mape_percent, "rmse": rep.rmse}
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "mae", "mape", "rmse"])
        for r in rows:
            w.writerow([r["axis"], r["value"], repr(r["mae"]), repr(r["mape"]), repr(r["rmse"])])
