"""Motif-GCRNN: Chebyshev graph convolution, two LSTM branches and a tanh regression head.

Everything runs in float64 numpy with a hand-written backward pass for this
fixed architecture. Batched arrays use the layouts

* frames: ``(batch, time, nodes)`` in normalized units,
* graph features: ``(batch * time, nodes, channels)``,
* LSTM inputs: ``(batch, time, nodes * channels)``.

Model outputs live in ``(-1, 1)`` and are mapped back to speed units with the
per-segment min/max scaler fitted on training data.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    pass


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z, activation: str):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _activate_grad(z, activation: str):
    if activation == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


# ---------------------------------------------------------------------------
# Chebyshev graph convolution


@dataclass
class ChebFilterParams:
    """Filter taps ``theta[k]`` of shape ``(K + 1, F_in, F_out)``."""

    coefficients: np.ndarray

    @property
    def order(self) -> int:
        return self.coefficients.shape[0] - 1


def _cheb_basis(x: np.ndarray, lap: np.ndarray, order: int) -> list[np.ndarray]:
    basis = [x]
    if order >= 1:
        basis.append(np.matmul(lap, x))
    for _ in range(2, order + 1):
        basis.append(2.0 * np.matmul(lap, basis[-1]) - basis[-2])
    return basis


def cheb_graph_conv(x, params: ChebFilterParams | np.ndarray, lap, activation: str = "relu") -> np.ndarray:
    """``sigma(sum_k T_k(L) x theta_k)`` via the three-term recurrence.

    ``x`` is ``(N, F_in)`` or batched ``(..., N, F_in)``; ``lap`` must already
    be rescaled to a spectrum in ``[-1, 1]``.
    """
    theta = params.coefficients if isinstance(params, ChebFilterParams) else np.asarray(params)
    lap = np.asarray(getattr(lap, "matrix", lap), dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim < 2 or x.shape[-2] != lap.shape[0]:
        raise ShapeError(f"signal {x.shape} does not match Laplacian {lap.shape}")
    if x.shape[-1] != theta.shape[1]:
        raise ShapeError(f"signal width {x.shape[-1]} != filter input width {theta.shape[1]}")
    basis = _cheb_basis(x, lap, theta.shape[0] - 1)
    out = sum(z @ theta[k] for k, z in enumerate(basis))
    out = _activate(out, activation)
    if not np.isfinite(out).all():
        raise TrainingDiverged("non-finite graph convolution output")
    return out


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmParams:
    """Gate weights stacked as ``[input, forget, output, candidate]`` along the last axis."""

    input_weights: np.ndarray  # (D, 4H)
    hidden_weights: np.ndarray  # (H, 4H)
    bias: np.ndarray  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.hidden_weights.shape[0]

    def gate(self, name: str):
        """Per-gate ``(W_x, W_h, b)`` views."""
        h = self.hidden_size
        i = ("input", "forget", "output", "candidate").index(name)
        sl = slice(i * h, (i + 1) * h)
        return self.input_weights[:, sl], self.hidden_weights[:, sl], self.bias[sl]


def _lstm_run(x: np.ndarray, wx, wh, b):
    """``x``: ``(B, T, D)``; returns final hidden state and the cache for backprop."""
    batch, steps, _ = x.shape
    hsz = wh.shape[0]
    zx = (x.reshape(batch * steps, -1) @ wx).reshape(batch, steps, 4 * hsz)
    h = np.zeros((batch, hsz), dtype=wh.dtype)
    c = np.zeros((batch, hsz), dtype=wh.dtype)
    cache = []
    for t in range(steps):
        z = zx[:, t] + h @ wh + b
        i = _sigmoid(z[:, :hsz])
        f = _sigmoid(z[:, hsz:2 * hsz])
        o = _sigmoid(z[:, 2 * hsz:3 * hsz])
        g = np.tanh(z[:, 3 * hsz:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        cache.append((h, c, i, f, o, g, tc))
        h, c = o * tc, c_new
    return h, cache


def _lstm_backprop(dh, x, wx, wh, cache, need_dx: bool):
    batch, steps, _ = x.shape
    hsz = wh.shape[0]
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * hsz, dtype=wh.dtype)
    dz_all = np.zeros((batch, steps, 4 * hsz), dtype=wh.dtype)
    dc = np.zeros((batch, hsz), dtype=wh.dtype)
    for t in range(steps - 1, -1, -1):
        h_prev, c_prev, i, f, o, g, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            do * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ], axis=1)
        dz_all[:, t] = dz
        dwh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dh = dz @ wh.T
        dc = dc * f
    flat = dz_all.reshape(batch * steps, -1)
    dwx = x.reshape(batch * steps, -1).T @ flat
    dx = (flat @ wx.T).reshape(x.shape) if need_dx else None
    return dwx, dwh, db, dx


def lstm_forward(sequence, params: LstmParams) -> np.ndarray:
    """Final hidden state of an LSTM run from zero state over ``sequence``.

    ``sequence`` is a list of equally shaped vectors (or a ``(T, D)`` array).
    """
    if len(sequence) == 0:
        raise ShapeError("empty sequence")
    try:
        x = np.asarray(sequence, dtype=float)
    except ValueError:
        raise ShapeError("sequence elements have different shapes") from None
    if x.ndim != 2:
        raise ShapeError("sequence elements must be 1-D vectors of equal length")
    if x.shape[1] != params.input_weights.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} != {params.input_weights.shape[0]}")
    h, _ = _lstm_run(x[None], params.input_weights, params.hidden_weights, params.bias)
    return h[0]


# ---------------------------------------------------------------------------
# Full model


@dataclass
class MinMaxScaler:
    """Per-segment affine map of ``[low, high]`` onto ``[-1, 1]``."""

    low: np.ndarray
    high: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "MinMaxScaler":
        """``values``: ``(N, T)`` training data."""
        return cls(np.min(values, axis=1).astype(float), np.max(values, axis=1).astype(float))

    @classmethod
    def identity(cls, n: int) -> "MinMaxScaler":
        return cls(-np.ones(n), np.ones(n))

    @property
    def _span(self):
        span = self.high - self.low
        return np.where(span > 0, span, 2.0)

    def transform(self, v):
        return 2.0 * (np.asarray(v) - self.low) / self._span - 1.0

    def inverse(self, v):
        return (np.asarray(v) + 1.0) * 0.5 * self._span + self.low


@dataclass
class MotifGcrnnModel:
    laplacian: np.ndarray  # rescaled, (N, N)
    params: dict[str, np.ndarray]
    trend_window: int
    period_window: int
    activation: str = "relu"
    scaler: MinMaxScaler | None = None

    def __post_init__(self):
        self.laplacian = np.asarray(self.laplacian, dtype=self.params["fc.b"].dtype)
        n = self.laplacian.shape[0]
        if self.scaler is None:
            self.scaler = MinMaxScaler.identity(n)
        if self.trend_window < 1 or self.period_window < 0:
            raise ShapeError("need trend_window >= 1 and period_window >= 0")
        if self.params["fc.W"].shape[0] != n:
            raise ShapeError("regression head width must equal node count")

    @property
    def node_count(self) -> int:
        return self.laplacian.shape[0]

    @property
    def dtype(self):
        return self.params["fc.b"].dtype

    @property
    def mgc_layers(self) -> list[ChebFilterParams]:
        return [ChebFilterParams(self.params[f"mgc{i}"]) for i in range(self.n_mgc_layers)]

    @property
    def n_mgc_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("mgc"))

    def lstm(self, branch: str) -> LstmParams:
        return LstmParams(self.params[f"{branch}.Wx"], self.params[f"{branch}.Wh"], self.params[f"{branch}.b"])

    @property
    def trend_lstm(self) -> LstmParams:
        return self.lstm("trend")

    @property
    def period_lstm(self) -> LstmParams | None:
        return self.lstm("period") if self.period_window else None

    def copy(self) -> "MotifGcrnnModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def init_model(laplacian, trend_window: int = 2, period_window: int = 7, order: int = 3,
               filters: int = 32, hidden: int = 64, layers: int = 1, seed: int = 0,
               activation: str = "relu", scaler: MinMaxScaler | None = None,
               zero: bool = False, dtype=np.float64) -> MotifGcrnnModel:
    """Glorot-uniform weights, zero biases except forget-gate bias 1.

    ``layers=0`` drops the graph convolution and feeds raw frames to the LSTMs.
    ``zero=True`` returns an all-zero parameter set. ``dtype=np.float32``
    roughly halves training time; gradient checks need float64.
    """
    lap = np.asarray(getattr(laplacian, "matrix", laplacian), dtype=float)
    n = lap.shape[0]
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        if zero:
            return np.zeros(shape)
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    params = {}
    width = 1
    for i in range(layers):
        params[f"mgc{i}"] = glorot((order + 1, width, filters), (order + 1) * width, filters)
        width = filters
    feat = n * width
    branches = ["trend"] + (["period"] if period_window else [])
    for br in branches:
        params[f"{br}.Wx"] = glorot((feat, 4 * hidden), feat, hidden)
        params[f"{br}.Wh"] = glorot((hidden, 4 * hidden), hidden, hidden)
        b = np.zeros(4 * hidden)
        if not zero:
            b[hidden:2 * hidden] = 1.0
        params[f"{br}.b"] = b
    params["fc.W"] = glorot((n, hidden * len(branches)), hidden * len(branches), n)
    params["fc.b"] = np.zeros(n)
    params = {k: v.astype(dtype) for k, v in params.items()}
    return MotifGcrnnModel(lap, params, trend_window, period_window, activation, scaler)


def _mgc_forward(model: MotifGcrnnModel, frames: np.ndarray):
    """Graph convolution of every frame; returns ``(B, T, N * F)`` features and a cache."""
    batch, steps, n_nodes = frames.shape
    h = frames.reshape(batch * steps, n_nodes, 1)
    cache = []
    for i in range(model.n_mgc_layers):
        theta = model.params[f"mgc{i}"]
        basis = _cheb_basis(h, model.laplacian, theta.shape[0] - 1)
        pre = basis[0] @ theta[0]
        for k in range(1, len(basis)):
            pre += basis[k] @ theta[k]
        cache.append((basis, pre))
        h = _activate(pre, model.activation)
    return h.reshape(batch, steps, -1), cache


def _mgc_backward(model: MotifGcrnnModel, cache, dfeats: np.ndarray, grads: dict) -> None:
    """Accumulate graph-convolution gradients from ``dfeats`` ``(B, T, N * F)`` into ``grads``."""
    batch, steps, _ = dfeats.shape
    n_nodes = model.node_count
    dh = dfeats.reshape(batch * steps, n_nodes, -1)
    for i in range(model.n_mgc_layers - 1, -1, -1):
        basis, pre = cache[i]
        theta = model.params[f"mgc{i}"]
        dpre = dh * _activate_grad(pre, model.activation)
        flat = dpre.reshape(-1, dpre.shape[-1])
        g = np.stack([z.reshape(-1, z.shape[-1]).T @ flat for z in basis])
        key = f"mgc{i}"
        grads[key] = grads[key] + g if key in grads else g
        if i == 0:
            break
        order = theta.shape[0] - 1
        dz = [dpre @ theta[k].T for k in range(order + 1)]
        lap_t = model.laplacian.T
        for k in range(order, 1, -1):
            dz[k - 1] = dz[k - 1] + 2.0 * np.matmul(lap_t, dz[k])
            dz[k - 2] = dz[k - 2] - dz[k]
        if order >= 1:
            dz[0] = dz[0] + np.matmul(lap_t, dz[1])
        dh = dz[0]


def _branches(model: MotifGcrnnModel):
    return ("trend", "period") if model.period_window else ("trend",)


def _forward_batch(model: MotifGcrnnModel, xt: np.ndarray, xp: np.ndarray | None):
    """Normalized forward pass. ``xt``: ``(B, m, N)``, ``xp``: ``(B, n, N)``.

    Both branches share the graph convolution layers.
    """
    p = model.params
    caches = {}
    outs = []
    for br, frames in zip(_branches(model), (xt, xp)):
        feats, mgc_cache = _mgc_forward(model, frames)
        hT, lcache = _lstm_run(feats, p[f"{br}.Wx"], p[f"{br}.Wh"], p[f"{br}.b"])
        caches[br] = (feats, mgc_cache, lcache)
        outs.append(hT)
    yc = np.concatenate(outs, axis=1)
    y = np.tanh(yc @ p["fc.W"].T + p["fc.b"])
    return y, (caches, yc, y)


def _backward_batch(model: MotifGcrnnModel, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    caches, yc, y = cache
    grads = {}
    dpre = dy * (1.0 - y * y)
    grads["fc.W"] = dpre.T @ yc
    grads["fc.b"] = dpre.sum(axis=0)
    dyc = dpre @ p["fc.W"]
    need_dx = model.n_mgc_layers > 0
    offset = 0
    for br in _branches(model):
        feats, mgc_cache, lcache = caches[br]
        hsz = p[f"{br}.Wh"].shape[0]
        dh = dyc[:, offset:offset + hsz]
        offset += hsz
        dwx, dwh, db, dx = _lstm_backprop(dh, feats, p[f"{br}.Wx"], p[f"{br}.Wh"], lcache, need_dx)
        grads[f"{br}.Wx"], grads[f"{br}.Wh"], grads[f"{br}.b"] = dwx, dwh, db
        if need_dx:
            _mgc_backward(model, mgc_cache, dx, grads)
    return grads


def _check_windows(model, xt, xp):
    xt = np.asarray(xt, dtype=model.dtype)
    if xt.ndim != 3 or xt.shape[1] != model.trend_window or xt.shape[2] != model.node_count:
        raise ShapeError(f"trend input {xt.shape} != (B, {model.trend_window}, {model.node_count})")
    if model.period_window:
        xp = np.asarray(xp, dtype=model.dtype)
        if xp.ndim != 3 or xp.shape[1] != model.period_window or xp.shape[2] != model.node_count:
            raise ShapeError(f"period input {xp.shape} != (B, {model.period_window}, {model.node_count})")
    elif xp is not None and np.size(xp):
        raise ShapeError("model has no period branch but period inputs were given")
    else:
        xp = None
    return xt, xp


def predict_normalized(model: MotifGcrnnModel, xt, xp=None) -> np.ndarray:
    """Batched forward in normalized units; inputs already normalized."""
    xt, xp = _check_windows(model, xt, xp)
    y, _ = _forward_batch(model, xt, xp)
    if not np.isfinite(y).all():
        raise TrainingDiverged("non-finite activations")
    return y


def predict(model: MotifGcrnnModel, trend, period=None) -> np.ndarray:
    """Batched forward in speed units: ``trend`` ``(B, m, N)``, ``period`` ``(B, n, N)``."""
    sc = model.scaler
    xt = sc.transform(np.asarray(trend, dtype=float))
    xp = sc.transform(np.asarray(period, dtype=float)) if model.period_window else None
    return sc.inverse(predict_normalized(model, xt, xp))


def forward(model: MotifGcrnnModel, trend_inputs, period_inputs=()) -> np.ndarray:
    """Predict one speed vector from ``m`` recent frames and ``n`` daily frames (speed units)."""
    if len(trend_inputs) != model.trend_window:
        raise ShapeError(f"expected {model.trend_window} trend frames, got {len(trend_inputs)}")
    if len(period_inputs) != model.period_window:
        raise ShapeError(f"expected {model.period_window} period frames, got {len(period_inputs)}")
    xt = np.asarray(trend_inputs, dtype=float)[None]
    xp = np.asarray(period_inputs, dtype=float)[None] if model.period_window else None
    return predict(model, xt, xp)[0]


def loss_mse(predicted, actual) -> float:
    """Squared Euclidean distance ``||actual - predicted||^2``."""
    a, b = np.asarray(predicted, dtype=float), np.asarray(actual, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


@dataclass
class Batch:
    """Normalized training windows: ``trend (B, m, N)``, ``period (B, n, N)``, ``target (B, N)``."""

    trend: np.ndarray
    period: np.ndarray | None
    target: np.ndarray

    def __len__(self):
        return len(self.target)

    def subset(self, idx) -> "Batch":
        return Batch(self.trend[idx], None if self.period is None else self.period[idx], self.target[idx])


def batch_loss(model: MotifGcrnnModel, batch: Batch) -> float:
    y, _ = _forward_batch(model, *_check_windows(model, batch.trend, batch.period))
    return loss_mse(y, batch.target)


def backward(model: MotifGcrnnModel, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Summed squared-error loss over the batch and its gradient for every parameter."""
    xt, xp = _check_windows(model, batch.trend, batch.period)
    y, cache = _forward_batch(model, xt, xp)
    target = np.asarray(batch.target, dtype=model.dtype)
    loss = loss_mse(y, target)
    grads = _backward_batch(model, cache, 2.0 * (y - target))
    if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
        raise TrainingDiverged("non-finite loss or gradient")
    return loss, grads


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    gradient_clip: float | None = 5.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        if self.gradient_clip is not None and not self.gradient_clip > 0:
            raise ValueError("gradient_clip must be positive or None")


@dataclass
class TrainResult:
    model: MotifGcrnnModel
    loss_history: list[float] = field(default_factory=list)


def train(model: MotifGcrnnModel, data: Batch, config: TrainConfig, callback=None) -> TrainResult:
    """Mini-batch SGD on the summed squared error.

    Returns a trained copy; ``loss_history[e]`` is the mean per-window loss
    seen during epoch ``e``. Shuffling is driven only by ``config.seed``.
    """
    if len(data) == 0:
        raise ValueError("no training windows")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = data.subset(order[start:start + config.batch_size])
            try:
                loss, grads = backward(model, batch)
            except TrainingDiverged as exc:
                raise TrainingDiverged(
                    f"epoch {epoch + 1}: {exc}; reduce learning_rate or enable gradient_clip") from None
            total += loss
            if config.gradient_clip is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > config.gradient_clip:
                    scale = config.gradient_clip / norm
                    grads = {k: g * scale for k, g in grads.items()}
            for k, g in grads.items():
                model.params[k] -= config.learning_rate * g
        mean = total / len(data)
        if not np.isfinite(mean):
            raise TrainingDiverged(f"epoch {epoch + 1}: loss is {mean}; reduce learning_rate")
        history.append(mean)
        log.debug("epoch %d loss %.6g", epoch + 1, mean)
        if callback is not None:
            callback(epoch + 1, mean)
    return TrainResult(model, history)


def write_loss_history(history, path) -> None:
    lines = ["epoch,loss"] + [f"{i + 1},{v:.17g}" for i, v in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints: a single .npz with a JSON header under the key "meta".


def save_checkpoint(model: MotifGcrnnModel, path, config: dict | None = None) -> None:
    meta = {
        "format": "wavemotif-checkpoint",
        "version": CHECKPOINT_VERSION,
        "trend_window": model.trend_window,
        "period_window": model.period_window,
        "activation": model.activation,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "config": config or {},
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["laplacian"] = model.laplacian
    arrays["scaler/low"] = model.scaler.low
    arrays["scaler/high"] = model.scaler.high
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    # Fixed member timestamps keep identical models byte-identical on disk.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> tuple[MotifGcrnnModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "wavemotif-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        for k, shape in meta["shapes"].items():
            if list(params[k].shape) != shape:
                raise ValueError(f"{path}: parameter {k} has shape {params[k].shape}, header says {shape}")
        model = MotifGcrnnModel(z["laplacian"].copy(), params, meta["trend_window"], meta["period_window"],
                                meta["activation"], MinMaxScaler(z["scaler/low"].copy(), z["scaler/high"].copy()))
    return model, meta.get("config", {})
