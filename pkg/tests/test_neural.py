import math

import numpy as np
import pytest

from oracles import dense_cheb_filter, lstm_step, random_graph
from wavemotif import neural
from wavemotif.neural import (Batch, ChebFilterParams, LstmParams, MinMaxScaler, ShapeError, TrainConfig,
                              TrainingDiverged, backward, batch_loss, cheb_graph_conv, forward, init_model,
                              load_checkpoint, lstm_forward, predict, save_checkpoint, train)
from wavemotif.roadgraph import (count_motif_participation, hop_distances, motif_laplacian,
                                 rescale_laplacian)


def rescaled_motif_laplacian(graph):
    return rescale_laplacian(motif_laplacian(count_motif_participation(graph))).matrix


def ring_laplacian(n):
    w = np.zeros((n, n))
    for i in range(n):
        w[i, (i + 1) % n] = w[(i + 1) % n, i] = 1
    return rescale_laplacian(motif_laplacian(w, symmetrize=False)).matrix


# ---------------------------------------------------------------------------
# Graph convolution


@pytest.mark.parametrize("order", range(0, 6))
def test_cheb_matches_dense_polynomial(order, rng):
    for _ in range(5):
        n = int(rng.integers(2, 9))
        lap = rescaled_motif_laplacian(random_graph(rng, n, 0.3))
        x = rng.normal(size=(n, 3))
        theta = rng.normal(size=(order + 1, 3, 2))
        got = cheb_graph_conv(x, ChebFilterParams(theta), lap, activation="linear")
        np.testing.assert_allclose(got, dense_cheb_filter(x, theta, lap), atol=1e-9)


def test_cheb_relu_and_batch(rng):
    lap = ring_laplacian(5)
    x = rng.normal(size=(4, 5, 2))
    theta = rng.normal(size=(3, 2, 3))
    out = cheb_graph_conv(x, theta, lap)
    np.testing.assert_allclose(out[2], np.maximum(dense_cheb_filter(x[2], theta, lap), 0), atol=1e-12)


@pytest.mark.parametrize("order", range(1, 6))
def test_impulse_response_is_k_local(order):
    n = 12
    lap = ring_laplacian(n)
    w = (np.abs(lap - np.diag(np.diag(lap))) > 0).astype(float)
    hops = hop_distances(w)
    theta = np.ones((order + 1, 1, 1))
    for src in (0, 5):
        x = np.zeros((n, 1))
        x[src] = 1.0
        y = cheb_graph_conv(x, theta, lap, activation="linear")[:, 0]
        assert np.all(y[hops[src] > order] == 0.0)
        assert np.any(y[hops[src] == order] != 0.0)


def test_cheb_shape_errors(rng):
    lap = ring_laplacian(4)
    with pytest.raises(ShapeError):
        cheb_graph_conv(rng.normal(size=(5, 1)), np.ones((2, 1, 1)), lap)
    with pytest.raises(ShapeError):
        cheb_graph_conv(rng.normal(size=(4, 2)), np.ones((2, 1, 1)), lap)


# ---------------------------------------------------------------------------
# LSTM


def test_lstm_scalar_hand_computation():
    # Only the candidate gate sees the input; every other gate sits at sigmoid(0) = 0.5.
    params = LstmParams(np.array([[0.0, 0.0, 0.0, 1.0]]), np.zeros((1, 4)), np.zeros(4))
    c = 0.5 * math.tanh(1.0)
    assert lstm_forward([[1.0]], params)[0] == pytest.approx(0.5 * math.tanh(c), abs=1e-15)


def test_lstm_matches_step_oracle(rng):
    d, h = 3, 5
    params = LstmParams(rng.normal(size=(d, 4 * h)), rng.normal(size=(h, 4 * h)), rng.normal(size=4 * h))
    seq = rng.normal(size=(6, d))
    hs, cs = np.zeros(h), np.zeros(h)
    for x in seq:
        hs, cs = lstm_step(x, hs, cs, params.input_weights, params.hidden_weights, params.bias)
    np.testing.assert_allclose(lstm_forward(seq, params), hs, atol=1e-12)
    wx, wh, b = params.gate("forget")
    np.testing.assert_array_equal(b, params.bias[h:2 * h])


def test_lstm_errors():
    params = LstmParams(np.zeros((2, 4)), np.zeros((1, 4)), np.zeros(4))
    with pytest.raises(ShapeError):
        lstm_forward([], params)
    with pytest.raises(ShapeError):
        lstm_forward([[1.0, 2.0, 3.0]], params)


# ---------------------------------------------------------------------------
# Model


def test_init_shapes_and_forget_bias():
    model = init_model(ring_laplacian(4), 2, 3, order=2, filters=5, hidden=6, seed=1)
    p = model.params
    assert p["mgc0"].shape == (3, 1, 5)
    assert p["trend.Wx"].shape == (20, 24) and p["period.Wh"].shape == (6, 24)
    assert p["fc.W"].shape == (4, 12)
    np.testing.assert_array_equal(p["trend.b"][6:12], 1.0)
    np.testing.assert_array_equal(p["trend.b"][:6], 0.0)
    lstm_only = init_model(ring_laplacian(4), 2, 0, layers=0, hidden=6)
    assert lstm_only.n_mgc_layers == 0 and lstm_only.period_lstm is None
    assert lstm_only.params["trend.Wx"].shape == (4, 24)


def test_forward_single_sample_matches_batch(rng):
    model = init_model(ring_laplacian(4), 2, 2, filters=3, hidden=4, seed=3,
                       scaler=MinMaxScaler(np.full(4, 10.0), np.full(4, 50.0)))
    trend, period = rng.uniform(10, 50, size=(2, 4)), rng.uniform(10, 50, size=(2, 4))
    y = forward(model, trend, period)
    np.testing.assert_allclose(y, predict(model, trend[None], period[None])[0], atol=1e-12)
    assert np.all((y >= 10) & (y <= 50))
    with pytest.raises(ShapeError):
        forward(model, trend[:1], period)


def test_zero_model_predicts_scaler_midpoint():
    scaler = MinMaxScaler(np.array([0.0, 20.0]), np.array([40.0, 60.0]))
    model = init_model(ring_laplacian(2), 2, 1, zero=True, scaler=scaler)
    y = predict(model, np.ones((3, 2, 2)), np.ones((3, 1, 2)))
    np.testing.assert_allclose(y, [[20.0, 40.0]] * 3)


def test_scaler_round_trip(rng):
    values = rng.uniform(5, 60, size=(3, 40))
    sc = MinMaxScaler.fit(values)
    values = values.T  # transform works on (..., segments)
    z = sc.transform(values)
    assert z.min() == pytest.approx(-1) and z.max() == pytest.approx(1)
    np.testing.assert_allclose(sc.inverse(z), values, atol=1e-12)
    flat = MinMaxScaler.fit(np.full((1, 5), 7.0))
    np.testing.assert_allclose(flat.inverse(flat.transform([[7.0]])), [[7.0]])


def _gradient_check(seed, layers=1, period=2):
    rng = np.random.default_rng(seed)
    lap = rescaled_motif_laplacian(random_graph(rng, 4, 0.5))
    model = init_model(lap, 2, period, order=2, filters=3, hidden=4, layers=layers, seed=seed,
                       activation="linear")
    data = Batch(rng.uniform(-1, 1, (3, 2, 4)), rng.uniform(-1, 1, (3, period, 4)) if period else None,
                 rng.uniform(-0.8, 0.8, (3, 4)))
    _, grads = backward(model, data)
    worst = 0.0
    eps = 1e-6
    for name, value in model.params.items():
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + eps
            up = batch_loss(model, data)
            value[idx] = orig - eps
            down = batch_loss(model, data)
            value[idx] = orig
            numeric = (up - down) / (2 * eps)
            g = grads[name][idx]
            if abs(g) > 1e-6:
                worst = max(worst, abs(numeric - g) / max(abs(g), abs(numeric)))
    return worst


@pytest.mark.parametrize("layers,period", [(1, 2), (2, 2), (0, 0)])
def test_gradients_match_finite_differences(layers, period):
    assert _gradient_check(11, layers, period) < 1e-4


def test_relu_gradient_check():
    rng = np.random.default_rng(0)
    model = init_model(ring_laplacian(4), 2, 2, filters=3, hidden=4, seed=0)
    data = Batch(rng.uniform(-1, 1, (2, 2, 4)), rng.uniform(-1, 1, (2, 2, 4)), rng.uniform(-1, 1, (2, 4)))
    _, grads = backward(model, data)
    value = model.params["mgc0"]
    eps = 1e-6
    value[1, 0, 2] += eps
    up = batch_loss(model, data)
    value[1, 0, 2] -= 2 * eps
    down = batch_loss(model, data)
    assert (up - down) / (2 * eps) == pytest.approx(grads["mgc0"][1, 0, 2], rel=1e-4, abs=1e-9)


# ---------------------------------------------------------------------------
# Training


def _toy_data(rng, n_samples=64, n=3, dtype=np.float64):
    trend = rng.uniform(-0.8, 0.8, (n_samples, 2, n))
    period = rng.uniform(-0.8, 0.8, (n_samples, 2, n))
    target = 0.5 * trend[:, -1] + 0.3 * period.mean(axis=1)
    return Batch(trend.astype(dtype), period.astype(dtype), target.astype(dtype))


def test_zero_learning_rate_keeps_parameters(rng):
    model = init_model(ring_laplacian(3), 2, 2, filters=3, hidden=4, seed=0)
    result = train(model, _toy_data(rng), TrainConfig(learning_rate=0.0, epochs=4))
    for k, v in model.params.items():
        np.testing.assert_array_equal(result.model.params[k], v)
    np.testing.assert_allclose(result.loss_history, result.loss_history[0], rtol=1e-12)


def test_training_is_seed_deterministic(rng):
    data = _toy_data(rng)
    model = init_model(ring_laplacian(3), 2, 2, filters=3, hidden=4, seed=0)
    a = train(model, data, TrainConfig(epochs=5, seed=9))
    b = train(model, data, TrainConfig(epochs=5, seed=9))
    assert a.loss_history == b.loss_history
    c = train(model, data, TrainConfig(epochs=5, seed=10))
    assert c.loss_history != a.loss_history


def test_training_converges_on_linear_target(rng):
    model = init_model(ring_laplacian(3), 2, 2, filters=4, hidden=8, seed=0)
    result = train(model, _toy_data(rng), TrainConfig(learning_rate=0.02, epochs=200, batch_size=16))
    assert result.loss_history[-1] < 0.1 * result.loss_history[0]


def test_float32_training(rng):
    model = init_model(ring_laplacian(3), 2, 2, filters=3, hidden=4, seed=0, dtype=np.float32)
    result = train(model, _toy_data(rng, dtype=np.float32), TrainConfig(epochs=3))
    assert result.model.dtype == np.float32
    assert result.loss_history[-1] < result.loss_history[0]


def test_divergence_is_reported(rng):
    model = init_model(ring_laplacian(3), 2, 2, filters=3, hidden=4, seed=0)
    data = _toy_data(rng)
    data.trend[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(model, data, TrainConfig(epochs=2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(gradient_clip=0)


def test_checkpoint_round_trip_and_bytes(tmp_path, rng):
    model = init_model(ring_laplacian(4), 2, 3, filters=3, hidden=4, seed=5,
                       scaler=MinMaxScaler(np.zeros(4), np.full(4, 60.0)))
    save_checkpoint(model, tmp_path / "a.npz", {"note": 1})
    save_checkpoint(model, tmp_path / "b.npz", {"note": 1})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    loaded, config = load_checkpoint(tmp_path / "a.npz")
    assert config == {"note": 1}
    for k, v in model.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)
    trend, period = rng.uniform(0, 60, (2, 2, 4)), rng.uniform(0, 60, (2, 3, 4))
    np.testing.assert_array_equal(predict(loaded, trend, period), predict(model, trend, period))


def test_loss_history_file(tmp_path):
    neural.write_loss_history([2.0, 1.5], tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and lines[1].startswith("1,2")
