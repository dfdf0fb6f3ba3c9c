"""Optimizers, the mini-batch training loop, and model checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import cross_entropy_batch, softmax

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BTCK"
CHECKPOINT_VERSION = 1


class NanLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adam"  # "sgd" | "momentum" | "adam"
    momentum: float = 0.9
    shuffle: str = "samples"  # "samples" | "blocks" (contiguous index blocks, shuffled)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class ArrayDataset:
    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y)

    def __len__(self):
        return len(self.y)

    def batch(self, idx):
        return self.X[idx], self.y[idx]


class Optimizer:
    def __init__(self, config: TrainConfig):
        self.cfg = config
        self.state: dict = {}
        self.t = 0

    def step(self, named):
        self.t += 1
        lr = self.cfg.learning_rate
        for key, params, grads, name in named:
            p, g = params[name], grads[name]
            if self.cfg.optimizer == "sgd":
                p -= lr * g
            elif self.cfg.optimizer == "momentum":
                v = self.state.setdefault(key, np.zeros_like(p))
                v *= self.cfg.momentum
                v -= lr * g
                p += v
            else:
                m, v = self.state.setdefault(key, (np.zeros_like(p), np.zeros_like(p)))
                m *= 0.9
                m += 0.1 * g
                v *= 0.999
                v += 0.001 * g * g
                mhat = m / (1 - 0.9**self.t)
                vhat = v / (1 - 0.999**self.t)
                p -= lr * mhat / (np.sqrt(vhat) + 1e-8)


def parameter_slots(model):
    """(key, params dict, grads dict, name) for every trainable tensor, in fixed order."""
    for lname, layer in model.named_layers():
        for pname in sorted(layer.params):
            yield f"{lname}.{pname}", layer.params, layer.grads, pname


def _batches(n, cfg: TrainConfig, rng):
    if cfg.shuffle == "blocks":
        starts = np.arange(0, n, cfg.batch_size)
        for s in rng.permutation(starts):
            yield np.arange(s, min(s + cfg.batch_size, n))
    else:
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            yield order[s : s + cfg.batch_size]


@dataclass
class TrainResult:
    loss_curve: list = field(default_factory=list)
    accuracy_curve: list = field(default_factory=list)


def train(model, dataset, config: TrainConfig) -> TrainResult:
    """Mini-batch training with seeded shuffling; deterministic for a fixed seed."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(config)
    result = TrainResult()
    for epoch in range(config.epochs):
        total, correct, count = 0.0, 0, 0
        for idx in _batches(len(dataset), config, rng):
            inputs, labels = dataset.batch(idx)
            model.zero_grad()
            logits = model.forward(inputs)
            loss, dlogits = cross_entropy_batch(logits, labels)
            if not np.isfinite(loss):
                raise NanLoss(f"non-finite loss at epoch {epoch} (lr={config.learning_rate})")
            model.backward(dlogits)
            opt.step(parameter_slots(model))
            total += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == labels))
            count += len(idx)
        result.loss_curve.append(total / count)
        result.accuracy_curve.append(correct / count)
        log.debug("epoch %d loss %.4f acc %.3f", epoch, total / count, correct / count)
    return result


def predict_proba(model, inputs):
    return softmax(model.forward(inputs))


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Versioned container: magic, version, JSON meta, then named little-endian f64 tensors."""
    head = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.array(tensors[name], dtype="<f8", order="C")
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(data[off : off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return tensors, meta


def model_tensors(model) -> dict:
    return {key: params[name] for key, params, _, name in parameter_slots(model)}


def load_model_tensors(model, tensors: dict) -> None:
    for key, params, _, name in parameter_slots(model):
        if params[name].shape != tensors[key].shape:
            raise ValueError(f"shape mismatch for {key}")
        params[name][...] = tensors[key]


def config_dict(cfg) -> dict:
    return asdict(cfg)
