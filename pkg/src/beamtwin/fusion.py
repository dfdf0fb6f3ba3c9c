"""Multimodal beam predictor: per-modality encoders, feature fusion, LSTM, softmax.

Camera depth goes through a 2-D CNN, the LiDAR range ring through a circular
1-D CNN, and the IMU/dead-reckoned-position window through an Elman RNN. The
encoded features are concatenated in a fixed order (camera, lidar,
imu_position), projected by one dense+ReLU layer, and a window of consecutive
anchors is fed to an LSTM whose final state is classified over the codebook.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import topk_curve
from .nn import layers as L
from .nn.training import TrainConfig, TrainResult, train

MODALITIES = ("camera", "lidar", "imu_position")


class ModalityDisabled(ValueError):
    pass


class WindowLengthMismatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass
class FusionConfig:
    modalities: tuple = MODALITIES
    camera_channels: tuple = (8, 16)
    camera_features: int = 64
    lidar_channels: tuple = (8, 16)
    lidar_kernel: int = 9
    lidar_pool: int = 4
    lidar_global_pool: bool = False
    lidar_features: int = 64
    imu_hidden: int = 32
    fused_size: int = 64
    lstm_hidden: int = 64
    window: int = 5
    n_beams: int = 36
    range_scale: float = 12.0
    position_scale: float = 10.0
    accel_scale: float = 10.0

    def __post_init__(self):
        self.modalities = tuple(m for m in MODALITIES if m in self.modalities)
        if not self.modalities:
            raise ValueError("at least one modality must be enabled")
        if self.window < 1:
            raise ValueError("window length must be >= 1")
        self.camera_channels = tuple(self.camera_channels)
        self.lidar_channels = tuple(self.lidar_channels)

    def to_dict(self):
        return asdict(self)


@dataclass
class InputShapes:
    camera: tuple  # (H, W)
    lidar: int
    imu: tuple  # (steps, features)


def _camera_encoder(cfg, shape, rng):
    h, w = shape
    layers, c = [], 1
    for ch in cfg.camera_channels:
        if h < 2 or w < 2:
            break
        layers += [L.Conv2D(c, ch, 3, rng, padding=1), L.ReLU(), L.MaxPool2D(2)]
        c, h, w = ch, h // 2, w // 2
    layers += [L.Flatten(), L.Dense(c * h * w, cfg.camera_features, rng), L.ReLU()]
    return L.Sequential(*layers), cfg.camera_features


def _lidar_encoder(cfg, n, rng):
    layers, c = [], 1
    for ch in cfg.lidar_channels:
        layers += [L.Conv1D(c, ch, cfg.lidar_kernel, rng, circular=True), L.ReLU()]
        if not cfg.lidar_global_pool:
            layers.append(L.MaxPool1D(cfg.lidar_pool))
            n //= cfg.lidar_pool
        c = ch
    if cfg.lidar_global_pool:
        layers += [L.GlobalMaxPool1D()]
        flat = c
    else:
        layers += [L.Flatten()]
        flat = c * n
    layers += [L.Dense(flat, cfg.lidar_features, rng), L.ReLU()]
    return L.Sequential(*layers), cfg.lidar_features


class FusionModel:
    def __init__(self, config: FusionConfig, shapes: InputShapes, seed: int = 0):
        self.config = config
        self.shapes = shapes
        rng = np.random.default_rng(seed)
        self.encoders: dict = {}
        sizes = []
        for m in config.modalities:
            if m == "camera":
                enc, size = _camera_encoder(config, shapes.camera, rng)
            elif m == "lidar":
                enc, size = _lidar_encoder(config, shapes.lidar, rng)
            else:
                enc, size = L.RNN(shapes.imu[1], config.imu_hidden, rng), config.imu_hidden
            self.encoders[m] = enc
            sizes.append(size)
        self.sizes = sizes
        self.fuse_dense = L.Dense(sum(sizes), config.fused_size, rng)
        self.fuse_relu = L.ReLU()
        self.lstm = L.LSTM(config.fused_size, config.lstm_hidden, rng)
        self.head = L.Dense(config.lstm_hidden, config.n_beams, rng)

    # -- parameter plumbing --------------------------------------------------

    def named_layers(self):
        for m, enc in self.encoders.items():
            if isinstance(enc, L.Sequential):
                yield from enc.named_layers(f"{m}.")
            else:
                yield m, enc
        yield "fuse", self.fuse_dense
        yield "lstm", self.lstm
        yield "head", self.head

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    # -- forward/backward ----------------------------------------------------

    def encode_inputs(self, inputs: dict) -> dict:
        """Per-modality features for a stack of prepared inputs."""
        return {m: self.encoders[m].forward(inputs[m]) for m in self.config.modalities}

    def fuse(self, features: dict) -> np.ndarray:
        if not isinstance(features, dict):
            raise TypeError("features must be a mapping keyed by modality name")
        if set(features) != set(self.config.modalities):
            raise ModalityDisabled(f"expected features for {self.config.modalities}, got {sorted(features)}")
        parts = []
        for m, size in zip(self.config.modalities, self.sizes):
            f = np.asarray(features[m])
            if f.shape[-1] != size:
                raise L.ShapeMismatch(f"{m} feature has size {f.shape[-1]}, expected {size}")
            parts.append(f)
        return self.fuse_relu.forward(self.fuse_dense.forward(np.concatenate(parts, axis=-1)))

    def forward(self, batch) -> np.ndarray:
        """Logits for a :class:`WindowBatch`."""
        feats = self.encode_inputs(batch.inputs)
        fused_u = self.fuse(feats)  # (U, F)
        seq = fused_u[batch.inverse]  # (N, T, F)
        self._cache = (batch, fused_u.shape)
        h = self.lstm.forward(seq)
        return self.head.forward(h)

    def backward(self, dlogits):
        batch, fshape = self._cache
        dh = self.head.backward(dlogits)
        dseq = self.lstm.backward(dh)
        dfused = np.zeros(fshape)
        np.add.at(dfused, batch.inverse.ravel(), dseq.reshape(-1, fshape[1]))
        dcat = self.fuse_dense.backward(self.fuse_relu.backward(dfused))
        splits = np.cumsum(self.sizes)[:-1]
        for m, d in zip(self.config.modalities, np.split(dcat, splits, axis=1)):
            self.encoders[m].backward(d)


def prepare_inputs(samples, config: FusionConfig) -> dict:
    """Stack and scale sample fields into encoder-ready arrays."""
    out = {}
    if "camera" in config.modalities:
        out["camera"] = np.stack([s.camera for s in samples])[:, None] / config.range_scale
    if "lidar" in config.modalities:
        out["lidar"] = np.stack([s.lidar for s in samples])[:, None] / config.range_scale
    if "imu_position" in config.modalities:
        imu = np.stack([s.imu_window for s in samples]).astype(float)
        imu[..., 0:2] /= config.accel_scale
        imu[..., 4:6] /= config.position_scale
        out["imu_position"] = imu
    return out


def input_shapes(sample) -> InputShapes:
    return InputShapes(tuple(sample.camera.shape), len(sample.lidar), tuple(sample.imu_window.shape))


@dataclass
class WindowBatch:
    inputs: dict  # modality -> (U, ...) arrays for unique samples
    inverse: np.ndarray  # (N, T) rows into the unique arrays


class WindowSet:
    """Windows of consecutive samples whose final anchors lie in [lo, hi); the label is the final anchor's."""

    def __init__(self, arrays: dict, labels, lo: int, hi: int, window: int):
        self.arrays = arrays
        self.labels = np.asarray(labels)
        self.window = window
        self.ends = np.arange(lo + window - 1, hi)

    def __len__(self):
        return len(self.ends)

    def window_indices(self, idx):
        ends = self.ends[np.asarray(idx)]
        return ends[:, None] - np.arange(self.window - 1, -1, -1)[None, :]

    def batch(self, idx):
        rows = self.window_indices(idx)
        uniq, inverse = np.unique(rows, return_inverse=True)
        inputs = {m: a[uniq] for m, a in self.arrays.items()}
        return WindowBatch(inputs, inverse.reshape(rows.shape)), self.labels[rows[:, -1]]


def predict_windows(model: FusionModel, wset: WindowSet, batch_size: int = 256) -> np.ndarray:
    probs = []
    for s in range(0, len(wset), batch_size):
        batch, _ = wset.batch(np.arange(s, min(s + batch_size, len(wset))))
        probs.append(L.softmax(model.forward(batch)))
    return np.concatenate(probs) if probs else np.zeros((0, model.config.n_beams))


def encode_modality(model: FusionModel, sample, modality: str) -> np.ndarray:
    if modality not in model.config.modalities:
        raise ModalityDisabled(f"modality {modality!r} is not enabled")
    inputs = prepare_inputs([sample], model.config)
    return model.encoders[modality].forward(inputs[modality])[0]


def predict(model: FusionModel, window) -> np.ndarray:
    """Probability vector over beams for one window of consecutive samples."""
    if len(window) != model.config.window:
        raise WindowLengthMismatch(f"window has {len(window)} samples, model expects {model.config.window}")
    arrays = prepare_inputs(window, model.config)
    batch = WindowBatch(arrays, np.arange(len(window))[None, :])
    return L.softmax(model.forward(batch))[0]


def split_windows(samples, config: FusionConfig, train_fraction: float = 0.8):
    """Chronological split; windows never straddle the boundary."""
    n = len(samples)
    n_train = int(math.floor(train_fraction * n))
    if n_train < config.window or n - n_train < config.window:
        raise InsufficientData(f"{n} samples cannot fill a window of {config.window} in both splits")
    arrays = prepare_inputs(samples, config)
    labels = [s.label for s in samples]
    return (
        WindowSet(arrays, labels, 0, n_train, config.window),
        WindowSet(arrays, labels, n_train, n, config.window),
        n_train,
    )


@dataclass
class FusionMetrics:
    loss_curve: list
    train_accuracy: list
    test_topk: list  # top-1..top-5
    n_train_samples: int
    n_test_samples: int
    n_train_windows: int
    n_test_windows: int
    test_probs: np.ndarray = field(repr=False, default=None)
    test_labels: np.ndarray = field(repr=False, default=None)


def train_fusion(samples, config: FusionConfig, train_config: TrainConfig, train_fraction: float = 0.8):
    if not samples:
        raise InsufficientData("empty dataset")
    train_set, test_set, n_train = split_windows(samples, config, train_fraction)
    model = FusionModel(config, input_shapes(samples[0]), seed=train_config.seed)
    result: TrainResult = train(model, train_set, train_config)
    probs = predict_windows(model, test_set)
    labels = test_set.labels[test_set.ends]
    metrics = FusionMetrics(
        loss_curve=result.loss_curve,
        train_accuracy=result.accuracy_curve,
        test_topk=topk_curve(probs, labels),
        n_train_samples=n_train,
        n_test_samples=len(samples) - n_train,
        n_train_windows=len(train_set),
        n_test_windows=len(test_set),
        test_probs=probs,
        test_labels=labels,
    )
    return model, metrics
