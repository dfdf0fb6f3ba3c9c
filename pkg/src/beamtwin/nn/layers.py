"""Differentiable layers in float64 numpy.

Every layer caches what its backward pass needs during ``forward`` and
*accumulates* parameter gradients in ``backward`` (call ``zero_grad``
between steps). Batched layers take the batch on axis 0.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


def glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.params = {"W": glorot(rng, (n_in, n_out), n_in, n_out), "b": np.zeros(n_out)}
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.params["W"].shape[0]:
            raise ShapeMismatch(f"Dense expects {self.params['W'].shape[0]} inputs, got {x.shape[-1]}")
        self.x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x2 = self.x.reshape(-1, self.x.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        self.grads["W"] += x2.T @ d2
        self.grads["b"] += d2.sum(axis=0)
        return dout @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x):
        self.mask = x > 0
        return np.maximum(x, 0.0)  # keeps NaN visible to the loss check

    def backward(self, dout):
        # subgradient at exactly 0 is 0
        return np.where(self.mask, dout, 0.0)


class Flatten(Layer):
    def forward(self, x):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self.shape)


class Conv2D(Layer):
    """Cross-correlation over (N, C, H, W) inputs with zero padding."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        fan_in, fan_out = in_ch * kh * kw, out_ch * kh * kw
        self.params = {"K": glorot(rng, (out_ch, in_ch, kh, kw), fan_in, fan_out), "b": np.zeros(out_ch)}
        self.stride, self.padding = stride, padding
        self.zero_grad()

    def forward(self, x):
        K = self.params["K"]
        f, c, kh, kw = K.shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeMismatch(f"Conv2D expects (N, {c}, H, W), got {x.shape}")
        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        if kh > xp.shape[2] or kw > xp.shape[3]:
            raise ShapeMismatch("kernel larger than padded input")
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]  # N,C,Ho,Wo,kh,kw
        n, _, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        self.cache = (x.shape, xp.shape, cols, ho, wo)
        out = cols @ K.reshape(f, -1).T + self.params["b"]
        return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(self, dout):
        K = self.params["K"]
        f, c, kh, kw = K.shape
        xshape, xpshape, cols, ho, wo = self.cache
        n = xshape[0]
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
        self.grads["K"] += (d2.T @ cols).reshape(K.shape)
        self.grads["b"] += d2.sum(axis=0)
        dcols = (d2 @ K.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xpshape)
        s = self.stride
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.padding
        return dxp[:, :, p : p + xshape[2], p : p + xshape[3]] if p else dxp


class Conv1D(Layer):
    """Stride-1 'same' 1-D cross-correlation over (N, C, L); circular or zero padding."""

    def __init__(self, in_ch, out_ch, width, rng, circular=True):
        super().__init__()
        if width % 2 == 0:
            raise ValueError("Conv1D width must be odd")
        self.params = {"K": glorot(rng, (out_ch, in_ch, width), in_ch * width, out_ch * width), "b": np.zeros(out_ch)}
        self.circular = circular
        self.zero_grad()

    def forward(self, x):
        K = self.params["K"]
        f, c, k = K.shape
        if x.ndim != 3 or x.shape[1] != c:
            raise ShapeMismatch(f"Conv1D expects (N, {c}, L), got {x.shape}")
        p = k // 2
        if self.circular:
            xp = np.concatenate([x[..., x.shape[2] - p :], x, x[..., :p]], axis=2)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
        win = sliding_window_view(xp, k, axis=2)  # N,C,L,k
        n, _, L, _ = win.shape
        cols = win.transpose(0, 2, 1, 3).reshape(n * L, c * k)
        self.cache = (x.shape, cols)
        out = cols @ K.reshape(f, -1).T + self.params["b"]
        return out.reshape(n, L, f).transpose(0, 2, 1)

    def backward(self, dout):
        K = self.params["K"]
        f, c, k = K.shape
        xshape, cols = self.cache
        n, _, L = xshape
        p = k // 2
        d2 = dout.transpose(0, 2, 1).reshape(-1, f)
        self.grads["K"] += (d2.T @ cols).reshape(K.shape)
        self.grads["b"] += d2.sum(axis=0)
        dcols = (d2 @ K.reshape(f, -1)).reshape(n, L, c, k)
        dxp = np.zeros((n, c, L + 2 * p))
        for j in range(k):
            dxp[:, :, j : j + L] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, p : p + L].copy()
        if self.circular and p:
            dx[:, :, L - p :] += dxp[:, :, :p]
            dx[:, :, :p] += dxp[:, :, L + p :]
        return dx


class MaxPool2D(Layer):
    """Max pooling over (N, C, H, W); ties route to the first index in the window."""

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = window
        self.stride = stride or window

    def forward(self, x):
        w, s = self.window, self.stride
        if x.ndim != 4 or w > x.shape[2] or w > x.shape[3]:
            raise ShapeMismatch(f"pool window {w} does not fit input {x.shape}")
        win = sliding_window_view(x, (w, w), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, w * w)
        arg = flat.argmax(axis=-1)
        # flat input index of each chosen element
        di, dj = np.divmod(arg, w)
        rows = np.arange(ho)[None, None, :, None] * s + di
        colsi = np.arange(wo)[None, None, None, :] * s + dj
        base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * x.shape[2] * x.shape[3]
        self.cache = (x.shape, (base + rows * x.shape[3] + colsi).ravel())
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, idx = self.cache
        dx = np.bincount(idx, weights=dout.ravel(), minlength=int(np.prod(shape)))
        return dx.reshape(shape)


class MaxPool1D(Layer):
    """Non-overlapping max pooling over (N, C, L); trailing remainder is dropped."""

    def __init__(self, window=4):
        super().__init__()
        self.window = window

    def forward(self, x):
        w = self.window
        n, c, L = x.shape
        lo = L // w
        if lo == 0:
            raise ShapeMismatch(f"pool window {w} longer than input {L}")
        v = x[:, :, : lo * w].reshape(n, c, lo, w)
        arg = v.argmax(axis=-1)
        self.cache = (x.shape, arg)
        return np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, arg = self.cache
        n, c, L = shape
        w = self.window
        lo = arg.shape[-1]
        dv = np.zeros((n, c, lo, w))
        np.put_along_axis(dv, arg[..., None], dout[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, : lo * w] = dv.reshape(n, c, lo * w)
        return dx


class GlobalMaxPool1D(Layer):
    """(N, C, L) -> (N, C); first index on ties."""

    def forward(self, x):
        self.shape = x.shape
        self.arg = x.argmax(axis=2)
        return np.take_along_axis(x, self.arg[..., None], axis=2)[..., 0]

    def backward(self, dout):
        dx = np.zeros(self.shape)
        np.put_along_axis(dx, self.arg[..., None], dout[..., None], axis=2)
        return dx


class RNN(Layer):
    """Elman RNN over (N, T, D); returns the final hidden state (N, H)."""

    def __init__(self, n_in, n_hidden, rng):
        super().__init__()
        self.params = {
            "Wx": glorot(rng, (n_in, n_hidden), n_in, n_hidden),
            "Wh": glorot(rng, (n_hidden, n_hidden), n_hidden, n_hidden),
            "b": np.zeros(n_hidden),
        }
        self.zero_grad()

    def forward(self, x, h0=None):
        n, T, d = x.shape
        if d != self.params["Wx"].shape[0]:
            raise ShapeMismatch(f"RNN expects input size {self.params['Wx'].shape[0]}, got {d}")
        H = self.params["Wh"].shape[0]
        h = np.zeros((n, H)) if h0 is None else h0
        hs = [h]
        for t in range(T):
            h = np.tanh(x[:, t] @ self.params["Wx"] + h @ self.params["Wh"] + self.params["b"])
            hs.append(h)
        self.cache = (x, hs)
        return h

    def backward(self, dh):
        x, hs = self.cache
        T = x.shape[1]
        dx = np.zeros_like(x)
        for t in reversed(range(T)):
            da = dh * (1.0 - hs[t + 1] ** 2)
            self.grads["Wx"] += x[:, t].T @ da
            self.grads["Wh"] += hs[t].T @ da
            self.grads["b"] += da.sum(axis=0)
            dx[:, t] = da @ self.params["Wx"].T
            dh = da @ self.params["Wh"].T
        self.dh0 = dh
        return dx


class LSTM(Layer):
    """LSTM over (N, T, D); gate order input, forget, candidate, output. Returns final h."""

    def __init__(self, n_in, n_hidden, rng, forget_bias=1.0):
        super().__init__()
        H = n_hidden
        b = np.zeros(4 * H)
        b[H : 2 * H] = forget_bias
        self.params = {
            "Wx": glorot(rng, (n_in, 4 * H), n_in, 4 * H),
            "Wh": glorot(rng, (H, 4 * H), H, 4 * H),
            "b": b,
        }
        self.zero_grad()

    def forward(self, x, h0=None, c0=None):
        n, T, d = x.shape
        if d != self.params["Wx"].shape[0]:
            raise ShapeMismatch(f"LSTM expects input size {self.params['Wx'].shape[0]}, got {d}")
        H = self.params["Wh"].shape[0]
        h = np.zeros((n, H)) if h0 is None else h0
        c = np.zeros((n, H)) if c0 is None else c0
        steps = []
        for t in range(T):
            z = x[:, t] @ self.params["Wx"] + h @ self.params["Wh"] + self.params["b"]
            i, f, o = sigmoid(z[:, :H]), sigmoid(z[:, H : 2 * H]), sigmoid(z[:, 3 * H :])
            g = np.tanh(z[:, 2 * H : 3 * H])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            steps.append((h, c, i, f, g, o, tc))
            h, c = o * tc, c_new
        self.cache = (x, steps)
        self.c = c
        return h

    def backward(self, dh, dc=None):
        x, steps = self.cache
        dx = np.zeros_like(x)
        dc = np.zeros_like(dh) if dc is None else dc
        for t in reversed(range(x.shape[1])):
            h_prev, c_prev, i, f, g, o, tc = steps[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc**2)
            di, df, dg = dc * g, dc * c_prev, dc * i
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g**2), do * o * (1 - o)], axis=1)
            self.grads["Wx"] += x[:, t].T @ dz
            self.grads["Wh"] += h_prev.T @ dz
            self.grads["b"] += dz.sum(axis=0)
            dx[:, t] = dz @ self.params["Wx"].T
            dh = dz @ self.params["Wh"].T
            dc = dc * f
        self.dh0, self.dc0 = dh, dc
        return dx


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}", layer

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy_batch(logits, labels):
    """Mean cross-entropy over a batch; returns (loss, dlogits)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")
    lp = log_softmax(logits)
    loss = -lp[np.arange(n), labels].mean()
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# -- single-sample functional forms ------------------------------------------------


def conv2d_forward(x, kernels, stride=1, padding=0):
    """Cross-correlate a (C, H, W) input with (F, C, kH, kW) kernels."""
    x = np.asarray(x, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"incompatible shapes {x.shape} and {kernels.shape}")
    layer = Conv2D(x.shape[0], kernels.shape[0], kernels.shape[2:], np.random.default_rng(0), stride, padding)
    layer.params["K"] = kernels
    return layer.forward(x[None])[0]


def relu(x):
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def maxpool2d(x, window=2, stride=None):
    """Max-pool a (C, H, W) input. Returns (output, flat argmax indices into x)."""
    pool = MaxPool2D(window, stride)
    out = pool.forward(np.asarray(x, dtype=float)[None])[0]
    return out, pool.cache[1].reshape(out.shape)


def rnn_step(x, h, params):
    """One Elman step: tanh(x Wx + h Wh + b)."""
    if x.shape[-1] != params["Wx"].shape[0] or h.shape[-1] != params["Wh"].shape[0]:
        raise ShapeMismatch("rnn_step dimension mismatch")
    return np.tanh(x @ params["Wx"] + h @ params["Wh"] + params["b"])


def lstm_step(x, h, c, params):
    """One LSTM step with gates packed as (input, forget, candidate, output)."""
    H = h.shape[-1]
    if x.shape[-1] != params["Wx"].shape[0] or params["Wh"].shape != (H, 4 * H):
        raise ShapeMismatch("lstm_step dimension mismatch")
    z = x @ params["Wx"] + h @ params["Wh"] + params["b"]
    i = sigmoid(np.atleast_1d(z[..., :H]))
    f = sigmoid(np.atleast_1d(z[..., H : 2 * H]))
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(np.atleast_1d(z[..., 3 * H :]))
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def softmax_cross_entropy(logits, label):
    """Loss and gradient for one logit vector: (-log p[label], p - onehot)."""
    logits = np.asarray(logits, dtype=float)
    k = logits.shape[-1]
    if k < 2:
        raise ValueError("need at least two classes")
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range [0, {k})")
    lp = log_softmax(logits)
    grad = np.exp(lp)
    grad[label] -= 1.0
    return float(-lp[label]), grad
