"""Central finite-difference gradient checks."""
import numpy as np


def numerical_gradient(f, x, eps=1e-6):
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_layer(layer, x, rng, eps=1e-6):
    """Compare analytic and numeric gradients of sum(w * layer(x)) for a random w.

    Returns a dict of relative errors keyed by ``"input"`` and parameter name.
    """
    out = layer.forward(x)
    w = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(w * layer.forward(x)))

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(w)
    analytic = {name: g.copy() for name, g in layer.grads.items()}
    errors = {"input": relative_error(dx, numerical_gradient(f, x, eps))}
    for name, p in layer.params.items():
        errors[name] = relative_error(analytic[name], numerical_gradient(f, p, eps))
    return errors


def _spread(rng, shape, gap=0.05):
    """Distinct values at least ``gap`` apart, so max/ReLU kinks sit far from any eps step."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + rng.uniform(0.01, gap - 0.01, n)
    return vals.reshape(shape)


def _cases():
    from . import layers as L

    def dense(rng):
        n_in, n_out = rng.integers(1, 8, 2)
        return L.Dense(n_in, n_out, rng), rng.standard_normal((rng.integers(1, 5), n_in))

    def relu(rng):
        return L.ReLU(), _spread(rng, (rng.integers(1, 4), rng.integers(1, 9)))

    def flatten(rng):
        return L.Flatten(), rng.standard_normal((2, *rng.integers(1, 4, 3)))

    def conv2d(rng):
        c, f = rng.integers(1, 4, 2)
        k = int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = rng.integers(k, k + 4, 2)
        return L.Conv2D(c, f, k, rng, stride, pad), rng.standard_normal((2, c, h, w))

    def conv1d(rng):
        c, f = rng.integers(1, 4, 2)
        k = int(rng.choice([1, 3, 5]))
        return L.Conv1D(c, f, k, rng, circular=bool(rng.integers(2))), rng.standard_normal((2, c, rng.integers(k, 12)))

    def maxpool2d(rng):
        w = int(rng.integers(1, 4))
        stride = int(rng.integers(1, w + 1))
        return L.MaxPool2D(w, stride), _spread(rng, (2, rng.integers(1, 3), *rng.integers(w, w + 4, 2)))

    def maxpool1d(rng):
        w = int(rng.integers(1, 5))
        return L.MaxPool1D(w), _spread(rng, (2, rng.integers(1, 3), rng.integers(w, 3 * w + 2)))

    def globalpool(rng):
        return L.GlobalMaxPool1D(), _spread(rng, (2, rng.integers(1, 4), rng.integers(1, 10)))

    def rnn(rng):
        d, h = rng.integers(1, 6, 2)
        return L.RNN(d, h, rng), rng.standard_normal((2, 5, d))

    def lstm(rng):
        d, h = rng.integers(1, 6, 2)
        layer = L.LSTM(d, h, rng)
        layer.params["b"] += 0.3 * rng.standard_normal(layer.params["b"].shape)
        return layer, rng.standard_normal((2, 4, d))

    return {
        "dense": dense, "relu": relu, "flatten": flatten, "conv2d": conv2d, "conv1d": conv1d,
        "maxpool2d": maxpool2d, "maxpool1d": maxpool1d, "globalmaxpool1d": globalpool,
        "rnn": rnn, "lstm": lstm,
    }


LAYER_CASES = tuple(_cases())


def layer_trials(name, trials=20, seed=0, eps=1e-6):
    """Worst relative error per trial for one layer type over random shapes and seeds."""
    make = _cases()[name]
    worst = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        layer, x = make(rng)
        worst.append(max(check_layer(layer, x.astype(float), rng, eps).values()))
    return worst


def softmax_ce_trials(trials=20, seed=0, eps=1e-6):
    from .layers import softmax_cross_entropy

    worst = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t, 1])
        k = int(rng.integers(2, 40))
        z = rng.standard_normal(k) * 3
        label = int(rng.integers(k))
        _, g = softmax_cross_entropy(z, label)
        worst.append(relative_error(g, numerical_gradient(lambda: softmax_cross_entropy(z, label)[0], z, eps)))
    return worst
