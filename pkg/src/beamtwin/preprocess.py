"""Align multi-rate sensor streams onto mmWave sweep timestamps.

Each sweep becomes an anchor. LiDAR ranges and dead-reckoned positions are
linearly interpolated at the anchor, the camera contributes its nearest
frame, SNRs are z-scored with training-split statistics, and the IMU window
preceding the anchor is kept for the recurrent encoder.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import sensors
from .bus import (
    SessionLog,
    Stream,
    TimestampedRecord,
    encode_frame,
    iter_frames,
)
from .scene import BeamSweep

NS = sensors.NS
IMU_FEATURES = ("acc_x", "acc_y", "cos_yaw", "sin_yaw", "rel_x", "rel_y")


class NoMmwaveData(ValueError):
    pass


class MissingStream(ValueError):
    pass


class OutOfRange(ValueError):
    pass


class DegenerateDistribution(ValueError):
    pass


class NonMonotoneTimestamps(ValueError):
    pass


@dataclass
class NormalizationStats:
    mean: np.ndarray  # scalar array when pooled, (n_beams,) per-beam
    std: np.ndarray

    @property
    def per_beam(self) -> bool:
        return np.ndim(self.mean) > 0

    def to_dict(self):
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class AlignedSample:
    timestamp: int
    camera: np.ndarray  # (H, W) depth, downsampled
    lidar: np.ndarray  # (n_rays,)
    rel_position: np.ndarray  # (2,)
    yaw: float
    imu_window: np.ndarray  # (window, len(IMU_FEATURES))
    snr_raw: np.ndarray
    snr_norm: np.ndarray
    label: int
    gaps: dict = field(default_factory=dict)  # modality -> source gap (ns)


@dataclass
class PreprocessConfig:
    camera_downsample: int = 4
    imu_window: int = 10
    train_fraction: float = 0.8
    per_beam_normalization: bool = False


# -- primitive operations -------------------------------------------------------


def anchor_on_mmwave(log: SessionLog) -> list:
    sweeps = []
    for rec in log.records:
        if rec.stream_id == Stream.MMWAVE:
            snr, best = sensors.decode_sweep(rec.payload)
            sweeps.append((rec.timestamp, BeamSweep(rec.timestamp, snr, best)))
    if not sweeps:
        raise NoMmwaveData("session log holds no mmWave sweeps")
    return sweeps


def interpolate_numeric(times, values, t):
    """Component-wise linear interpolation between the records bracketing ``t``."""
    times = np.asarray(times, dtype=np.int64)
    if len(times) < 2:
        raise OutOfRange("interpolation needs at least two records")
    if t < times[0] or t > times[-1]:
        raise OutOfRange(f"t={t} outside [{times[0]}, {times[-1]}]")
    i = int(np.searchsorted(times, t, side="right")) - 1
    if i >= len(times) - 1 or times[i] == t:
        return np.array(values[i], dtype=float, copy=True)
    t0, t1 = int(times[i]), int(times[i + 1])
    w = (t - t0) / (t1 - t0)
    v0 = np.asarray(values[i], dtype=float)
    v1 = np.asarray(values[i + 1], dtype=float)
    return v0 + w * (v1 - v0)


def bracket_gap(times, t) -> int:
    """Distance from t to the nearer of its two bracketing records."""
    times = np.asarray(times, dtype=np.int64)
    i = int(np.searchsorted(times, t, side="right")) - 1
    i = min(max(i, 0), len(times) - 1)
    gap = abs(int(t) - int(times[i]))
    if i + 1 < len(times):
        gap = min(gap, abs(int(times[i + 1]) - int(t)))
    return gap


def nearest_index(times, t):
    """Index of the record closest to t (earlier record on ties) and the gap in ns."""
    times = np.asarray(times, dtype=np.int64)
    if len(times) == 0:
        raise ValueError("empty stream")
    j = int(np.searchsorted(times, t, side="left"))
    best = None
    for k in (j - 1, j):
        if 0 <= k < len(times):
            gap = abs(int(times[k]) - int(t))
            if best is None or gap < best[1]:
                best = (k, gap)
    return best


def nearest_frame(times, frames, t):
    k, gap = nearest_index(times, t)
    return frames[k], gap


def normalize_snr(snr_rows, per_beam: bool = False) -> NormalizationStats:
    x = np.asarray(snr_rows, dtype=float)
    if per_beam:
        mean, std = x.mean(axis=0), x.std(axis=0)
        if np.any(std == 0):
            raise DegenerateDistribution("a beam has zero SNR variance in the training split")
    else:
        mean, std = np.asarray(x.mean()), np.asarray(x.std())
        if std == 0:
            raise DegenerateDistribution("training SNRs have zero variance")
    return NormalizationStats(mean, std)


def apply_normalization(stats: NormalizationStats, snr) -> np.ndarray:
    return (np.asarray(snr, dtype=float) - stats.mean) / stats.std


def dead_reckon(timestamps, acc_body, yaw) -> np.ndarray:
    """Double-integrate body-frame accelerations into positions relative to the first sample.

    Rotation to the world frame uses each sample's yaw; integration is
    trapezoidal on both stages, starting from rest.
    """
    t = np.asarray(timestamps, dtype=np.int64)
    if len(t) < 2:
        raise ValueError("dead reckoning needs at least two samples")
    if np.any(np.diff(t) < 0):
        raise NonMonotoneTimestamps("IMU timestamps must be non-decreasing")
    acc = np.asarray(acc_body, dtype=float)[:, :2]
    c, s = np.cos(yaw), np.sin(yaw)
    acc_w = np.stack([c * acc[:, 0] - s * acc[:, 1], s * acc[:, 0] + c * acc[:, 1]], axis=1)
    dt = (np.diff(t) / NS)[:, None]
    vel = np.vstack([np.zeros((1, 2)), np.cumsum(0.5 * (acc_w[1:] + acc_w[:-1]) * dt, axis=0)])
    pos = np.vstack([np.zeros((1, 2)), np.cumsum(0.5 * (vel[1:] + vel[:-1]) * dt, axis=0)])
    return pos


def downsample(image, factor: int) -> np.ndarray:
    """Average-pool by an integer factor, cropping any remainder."""
    if factor <= 1:
        return np.asarray(image, dtype=float)
    h, w = image.shape
    h2, w2 = h // factor, w // factor
    img = np.asarray(image, dtype=float)[: h2 * factor, : w2 * factor]
    return img.reshape(h2, factor, w2, factor).mean(axis=(1, 3))


# -- dataset assembly -------------------------------------------------------------


@dataclass
class Dataset:
    samples: list
    stats: NormalizationStats
    n_train: int
    drops: Counter = field(default_factory=Counter)
    n_anchors: int = 0


def _split_streams(log: SessionLog):
    by = {}
    for rec in log.records:
        by.setdefault(rec.stream_id, []).append(rec)
    return by


def build_dataset(log: SessionLog, config: PreprocessConfig = PreprocessConfig()) -> Dataset:
    """Turn a session log into mmWave-anchored samples.

    Anchors without bracketing LiDAR/IMU data or outside camera coverage are
    dropped and tallied in ``drops``. Normalization statistics come from the
    first ``train_fraction`` of the kept samples only.
    """
    by = _split_streams(log)
    for need in (Stream.CAMERA, Stream.LIDAR, Stream.IMU):
        if need not in by:
            raise MissingStream(f"log has no {Stream(need).name.lower()} stream")
    anchors = anchor_on_mmwave(log)

    cam_t = np.array([r.timestamp for r in by[Stream.CAMERA]], dtype=np.int64)
    lid_t = np.array([r.timestamp for r in by[Stream.LIDAR]], dtype=np.int64)
    lid_v = [sensors.decode_lidar(r.payload) for r in by[Stream.LIDAR]]
    imu_t = np.array([r.timestamp for r in by[Stream.IMU]], dtype=np.int64)
    imu_v = np.array([sensors.decode_imu(r.payload) for r in by[Stream.IMU]])
    if len(imu_t) < 2:
        raise MissingStream("IMU stream too short for dead reckoning")
    yaw = imu_v[:, 8]
    rel = dead_reckon(imu_t, imu_v[:, 0:3], yaw)
    imu_feat = np.column_stack([imu_v[:, 0], imu_v[:, 1], np.cos(yaw), np.sin(yaw), rel])

    kept, drops = [], Counter()
    for ts, sw in anchors:
        if len(cam_t) == 0 or not cam_t[0] <= ts <= cam_t[-1]:
            drops["camera"] += 1
            continue
        if len(lid_t) < 2 or not lid_t[0] <= ts <= lid_t[-1]:
            drops["lidar"] += 1
            continue
        if not imu_t[0] <= ts <= imu_t[-1]:
            drops["imu"] += 1
            continue
        kept.append((ts, sw))

    if not kept:
        return Dataset([], NormalizationStats(np.asarray(0.0), np.asarray(1.0)), 0, drops, len(anchors))
    n_train = int(math.floor(config.train_fraction * len(kept)))
    train_snr = [sw.snr for _, sw in kept[: max(n_train, 1)]]
    stats = normalize_snr(train_snr, config.per_beam_normalization)

    samples = []
    for ts, sw in kept:
        k, cam_gap = nearest_index(cam_t, ts)
        cam = downsample(sensors.decode_camera(by[Stream.CAMERA][k].payload), config.camera_downsample)
        lidar = interpolate_numeric(lid_t, lid_v, ts)
        pos = interpolate_numeric(imu_t, rel, ts)
        j = int(np.searchsorted(imu_t, ts, side="right"))
        idx = np.arange(j - config.imu_window, j).clip(0, len(imu_t) - 1)
        ki, imu_gap = nearest_index(imu_t, ts)
        samples.append(
            AlignedSample(
                timestamp=int(ts),
                camera=cam,
                lidar=lidar,
                rel_position=pos,
                yaw=float(yaw[ki]),
                imu_window=imu_feat[idx],
                snr_raw=sw.snr,
                snr_norm=apply_normalization(stats, sw.snr),
                label=sw.best_index,
                gaps={
                    "camera": cam_gap,
                    "lidar": bracket_gap(lid_t, ts),
                    "imu": imu_gap,
                },
            )
        )
    return Dataset(samples, stats, n_train, drops, len(anchors))


# -- dataset container ------------------------------------------------------------


def _encode_sample(s: AlignedSample) -> bytes:
    h, w = s.camera.shape
    win, nf = s.imu_window.shape
    head = struct.pack("<HHHHHH", h, w, len(s.lidar), win, nf, len(s.snr_raw))
    gaps = struct.pack("<qqqd", s.gaps.get("camera", 0), s.gaps.get("lidar", 0), s.gaps.get("imu", 0), s.yaw)
    arrays = [s.camera.ravel(), s.lidar, s.rel_position, s.imu_window.ravel(), s.snr_raw, s.snr_norm]
    body = b"".join(np.asarray(a, dtype="<f8").tobytes() for a in arrays)
    return head + gaps + struct.pack("<H", s.label) + body


def _decode_sample(ts: int, payload: bytes) -> AlignedSample:
    h, w, nl, win, nf, nb = struct.unpack_from("<HHHHHH", payload)
    cg, lg, ig, yaw = struct.unpack_from("<qqqd", payload, 12)
    (label,) = struct.unpack_from("<H", payload, 44)
    flat = np.frombuffer(payload, dtype="<f8", offset=46)
    sizes = [h * w, nl, 2, win * nf, nb, nb]
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return AlignedSample(
        timestamp=ts,
        camera=parts[0].reshape(h, w).copy(),
        lidar=parts[1].copy(),
        rel_position=parts[2].copy(),
        yaw=yaw,
        imu_window=parts[3].reshape(win, nf).copy(),
        snr_raw=parts[4].copy(),
        snr_norm=parts[5].copy(),
        label=int(label),
        gaps={"camera": cg, "lidar": lg, "imu": ig},
    )


def save_dataset(path, ds: Dataset) -> None:
    """Binary container: one header frame (JSON stats/meta) then one frame per sample."""
    meta = {
        "stats": ds.stats.to_dict(),
        "n_train": ds.n_train,
        "n_anchors": ds.n_anchors,
        "drops": dict(sorted(ds.drops.items())),
    }
    with open(path, "wb") as f:
        f.write(encode_frame(TimestampedRecord(Stream.DATASET_HEADER, 0, json.dumps(meta, sort_keys=True).encode())))
        for s in ds.samples:
            f.write(encode_frame(TimestampedRecord(Stream.DATASET_SAMPLE, s.timestamp, _encode_sample(s))))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    frames = iter_frames(data)
    head, _ = next(frames)
    if head.stream_id != Stream.DATASET_HEADER:
        raise ValueError("dataset file does not start with a header frame")
    meta = json.loads(head.payload)
    samples = [_decode_sample(r.timestamp, r.payload) for r, _ in frames]
    return Dataset(samples, NormalizationStats.from_dict(meta["stats"]), meta["n_train"],
                   Counter(meta["drops"]), meta["n_anchors"])


def write_summary_csv(path, ds: Dataset) -> None:
    n_beams = len(ds.samples[0].snr_norm) if ds.samples else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "label", "rel_x", "rel_y"] + [f"snr_norm_{k}" for k in range(n_beams)])
        for s in ds.samples:
            w.writerow([s.timestamp, s.label, repr(float(s.rel_position[0])), repr(float(s.rel_position[1]))]
                       + [repr(float(v)) for v in s.snr_norm])
