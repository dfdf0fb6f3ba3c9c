import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from beamtwin.nn import layers as L
from beamtwin.nn.gradcheck import LAYER_CASES, layer_trials, numerical_gradient, relative_error, softmax_ce_trials
from beamtwin.nn.training import (
    ArrayDataset,
    NanLoss,
    TrainConfig,
    load_checkpoint,
    load_model_tensors,
    model_tensors,
    parameter_slots,
    save_checkpoint,
    train,
)


class Net(L.Sequential):
    """Sequential with the named_layers/forward/backward protocol the trainer expects."""


def mlp(n_in, n_out, seed=0, hidden=8):
    rng = np.random.default_rng(seed)
    return Net(L.Dense(n_in, hidden, rng), L.ReLU(), L.Dense(hidden, n_out, rng))


# -- gradient suite ------------------------------------------------------------------


@pytest.mark.parametrize("name", LAYER_CASES)
def test_layer_gradients(name):
    errors = layer_trials(name, trials=20)
    assert len(errors) >= 20
    assert max(errors) < 1e-5


def test_softmax_cross_entropy_gradient():
    assert max(softmax_ce_trials(20)) < 1e-8


def test_rnn_bptt_five_steps():
    rng = np.random.default_rng(3)
    layer = L.RNN(3, 4, rng)
    x = rng.standard_normal((1, 5, 3))
    w = rng.standard_normal((1, 4))

    def f():
        return float(np.sum(w * layer.forward(x)))

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(w)
    for name, p in layer.params.items():
        assert relative_error(layer.grads[name], numerical_gradient(f, p)) < 1e-6
    assert relative_error(dx, numerical_gradient(f, x)) < 1e-6


def test_lstm_four_steps_all_parameters():
    rng = np.random.default_rng(8)
    layer = L.LSTM(2, 3, rng)
    x = rng.standard_normal((1, 4, 2))
    w = rng.standard_normal((1, 3))

    def f():
        return float(np.sum(w * layer.forward(x)))

    layer.zero_grad()
    layer.forward(x)
    layer.backward(w)
    for name, p in layer.params.items():
        assert relative_error(layer.grads[name], numerical_gradient(f, p)) < 1e-6


# -- conv / relu / pool examples --------------------------------------------------------


def naive_conv2d(x, k, stride, pad):
    c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((f, ho, wo))
    for fi in range(f):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[ci, i * stride + a, j * stride + b] * k[fi, ci, a, b]
                out[fi, i, j] = acc
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 4, 5))
    assert np.array_equal(L.conv2d_forward(x, np.ones((1, 1, 1, 1))), x)


def test_conv_all_ones():
    assert L.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3))).tolist() == [[[9.0]]]


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 2)])
def test_conv_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    got = L.conv2d_forward(x, k, stride, pad)
    assert got.shape == ((3, (5 + 2 * pad - 3) // stride + 1, (5 + 2 * pad - 3) // stride + 1))
    assert np.allclose(got, naive_conv2d(x, k, stride, pad), atol=1e-12, rtol=0)


def test_conv_shape_mismatch():
    with pytest.raises(L.ShapeMismatch):
        L.conv2d_forward(np.ones((2, 3, 3)), np.ones((1, 1, 3, 3)))
    with pytest.raises(L.ShapeMismatch):
        L.conv2d_forward(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_relu_examples():
    assert L.relu([-1.0, 2.0, 0.0]).tolist() == [0.0, 2.0, 0.0]
    x = np.abs(np.random.default_rng(1).standard_normal(10))
    assert np.array_equal(L.relu(x), x)
    layer = L.ReLU()
    layer.forward(np.array([[-1.0, 0.0, 2.0]]))
    assert layer.backward(np.ones((1, 3))).tolist() == [[0.0, 0.0, 1.0]]


def test_maxpool_examples():
    out, idx = L.maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)
    assert out.tolist() == [[[4.0]]] and idx.ravel().tolist() == [3]
    out, idx = L.maxpool2d(np.full((1, 4, 4), 7.0), 2)
    assert np.all(out == 7.0)
    assert idx.ravel().tolist() == [0, 2, 8, 10]


def test_maxpool_translation_within_window():
    outs = []
    for i, j in itertools.product(range(2), range(2)):
        x = np.zeros((1, 4, 4))
        x[0, 2 + i, 0 + j] = 1.0
        outs.append(L.maxpool2d(x, 2)[0])
    assert all(np.array_equal(o, outs[0]) for o in outs)


def test_maxpool_window_too_big():
    with pytest.raises(L.ShapeMismatch):
        L.MaxPool2D(3).forward(np.ones((1, 1, 2, 5)))


# -- recurrent cells ------------------------------------------------------------------------


def test_rnn_step_examples():
    params = {"Wx": np.zeros((3, 4)), "Wh": np.zeros((4, 4)), "b": np.zeros(4)}
    assert np.all(L.rnn_step(np.ones(3), np.ones(4), params) == 0.0)
    params = {"Wx": np.random.default_rng(0).standard_normal((3, 4)), "Wh": 0.1 * np.eye(4), "b": np.zeros(4)}
    h = np.array([0.5, -0.2, 0.1, 0.0])
    assert np.allclose(L.rnn_step(np.zeros(3), h, params), np.tanh(0.1 * h))
    with pytest.raises(L.ShapeMismatch):
        L.rnn_step(np.zeros(2), h, params)


def test_rnn_layer_matches_steps():
    rng = np.random.default_rng(2)
    layer = L.RNN(3, 4, rng)
    x = rng.standard_normal((2, 5, 3))
    h = np.zeros((2, 4))
    for t in range(5):
        h = L.rnn_step(x[:, t], h, layer.params)
    assert np.allclose(layer.forward(x), h, atol=1e-14)


def test_lstm_step_examples():
    H = 3
    rng = np.random.default_rng(0)
    c = rng.standard_normal(H)
    b = np.zeros(4 * H)
    b[:H] = -1e3  # input gate closed
    b[H : 2 * H] = 1e3  # forget gate open
    params = {"Wx": np.zeros((2, 4 * H)), "Wh": np.zeros((H, 4 * H)), "b": b}
    _, c_new = L.lstm_step(rng.standard_normal(2), rng.standard_normal(H), c, params)
    assert np.allclose(c_new, c, atol=1e-12)
    params = {"Wx": rng.standard_normal((2, 4 * H)), "Wh": rng.standard_normal((H, 4 * H)), "b": np.zeros(4 * H)}
    h, c = L.lstm_step(np.zeros(2), np.zeros(H), np.zeros(H), params)
    assert np.all(h == 0.0) and np.all(c == 0.0)


def test_lstm_layer_matches_steps():
    rng = np.random.default_rng(5)
    layer = L.LSTM(3, 4, rng)
    x = rng.standard_normal((2, 6, 3))
    h = c = np.zeros((2, 4))
    for t in range(6):
        h, c = L.lstm_step(x[:, t], h, c, layer.params)
    assert np.allclose(layer.forward(x), h, atol=1e-14)


# -- softmax / loss ----------------------------------------------------------------------------


def test_uniform_logits_loss():
    loss, grad = L.softmax_cross_entropy(np.zeros(36), 4)
    assert loss == pytest.approx(math.log(36), abs=1e-12)
    assert loss == pytest.approx(3.5835, abs=1e-4)
    assert grad[0] == pytest.approx(1 / 36) and grad[4] == pytest.approx(1 / 36 - 1)


def test_large_logit_is_stable():
    z = np.zeros(36)
    z[7] = 1000.0
    loss, grad = L.softmax_cross_entropy(z, 7)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))
    loss, _ = L.softmax_cross_entropy(z, 0)
    assert loss == pytest.approx(1000.0)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        L.softmax_cross_entropy(np.zeros(5), 5)
    with pytest.raises(ValueError):
        L.cross_entropy_batch(np.zeros((2, 5)), [0, -1])


@settings(max_examples=200)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 40)), elements=st.floats(-1e4, 1e4)))
def test_softmax_is_probability_vector(z):
    p = L.softmax(z)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_batch_loss_matches_single():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((6, 10))
    y = rng.integers(0, 10, 6)
    loss, grad = L.cross_entropy_batch(z, y)
    singles = [L.softmax_cross_entropy(z[i], y[i]) for i in range(6)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    assert np.allclose(grad, np.stack([s[1] for s in singles]) / 6)


# -- training ---------------------------------------------------------------------------------


def toy_problem(seed=0, n=80):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    y = (X @ [1.0, -2.0] > 0).astype(int)
    X += np.where(y[:, None] == 1, 0.3, -0.3) * np.array([1.0, -2.0]) / math.sqrt(5)
    return ArrayDataset(X, y)


def test_toy_separable_problem_reaches_full_accuracy():
    data = toy_problem()
    for opt, lr in (("sgd", 0.1), ("momentum", 0.05), ("adam", 0.01)):
        model = mlp(2, 2, seed=1)
        result = train(model, data, TrainConfig(learning_rate=lr, batch_size=16, epochs=200, optimizer=opt))
        acc = np.mean(model.forward(data.X).argmax(axis=1) == data.y)
        assert acc == 1.0, opt
        assert result.loss_curve[-1] < result.loss_curve[0]


def test_zero_learning_rate_leaves_parameters():
    model = mlp(2, 2)
    before = {k: v.copy() for k, v in model_tensors(model).items()}
    for opt in ("sgd", "momentum", "adam"):
        train(model, toy_problem(), TrainConfig(learning_rate=0.0, epochs=3, optimizer=opt))
    after = model_tensors(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


@pytest.mark.parametrize("shuffle", ["samples", "blocks"])
def test_training_is_deterministic(shuffle):
    runs = []
    for _ in range(2):
        model = mlp(2, 2, seed=3)
        res = train(model, toy_problem(), TrainConfig(learning_rate=0.01, epochs=5, seed=9, shuffle=shuffle))
        runs.append((res.loss_curve, model_tensors(model)))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_one_small_step_does_not_increase_loss():
    rng = np.random.default_rng(6)
    for trial in range(10):
        model = mlp(4, 5, seed=trial, hidden=6)
        X, y = rng.standard_normal((16, 4)), rng.integers(0, 5, 16)
        model.zero_grad()
        loss0, d = L.cross_entropy_batch(model.forward(X), y)
        model.backward(d)
        lr = 1.0
        while True:
            snapshot = {k: v.copy() for k, v in model_tensors(model).items()}
            for _, params, grads, name in parameter_slots(model):
                params[name] -= lr * grads[name]
            loss1, _ = L.cross_entropy_batch(model.forward(X), y)
            if loss1 <= loss0 + 1e-12 or lr < 1e-12:
                break
            load_model_tensors(model, snapshot)
            lr /= 2
        assert loss1 <= loss0 + 1e-12


def test_nan_loss_aborts():
    data = ArrayDataset(np.array([[np.nan, 0.0]] * 4), np.array([0, 1, 0, 1]))
    with pytest.raises(NanLoss):
        train(mlp(2, 2), data, TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(mlp(2, 2), ArrayDataset(np.zeros((0, 2)), np.zeros(0, dtype=int)), TrainConfig())


# -- shape algebra / checkpoints ---------------------------------------------------------------


@pytest.mark.parametrize("h,w", [(90, 160), (36, 64), (22, 40), (9, 16), (720 // 8, 1280 // 8)])
@pytest.mark.parametrize("channels", [(8, 16), (4,), (2, 4, 8)])
def test_camera_pipeline_shapes(h, w, channels):
    from beamtwin.fusion import FusionConfig, _camera_encoder

    enc, size = _camera_encoder(FusionConfig(camera_channels=channels), (h, w), np.random.default_rng(0))
    assert enc.forward(np.zeros((2, 1, h, w))).shape == (2, size)


@pytest.mark.parametrize("rays", [1600, 400, 360])
@pytest.mark.parametrize("global_pool", [False, True])
def test_lidar_pipeline_shapes(rays, global_pool):
    from beamtwin.fusion import FusionConfig, _lidar_encoder

    enc, size = _lidar_encoder(FusionConfig(lidar_global_pool=global_pool), rays, np.random.default_rng(0))
    assert enc.forward(np.zeros((3, 1, rays))).shape == (3, size)


def test_checkpoint_round_trip(tmp_path):
    model = mlp(3, 4, seed=2)
    tensors = model_tensors(model)
    tensors["scalarish"] = np.array(3.25)
    save_checkpoint(tmp_path / "m.ckpt", tensors, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"note": "x"}
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].shape == np.shape(tensors[k]) and np.array_equal(back[k], tensors[k])
    other = mlp(3, 4, seed=99)
    del back["scalarish"]
    load_model_tensors(other, back)
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert np.array_equal(other.forward(x), model.forward(x))
    save_checkpoint(tmp_path / "n.ckpt", tensors, {"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
