"""Experiment configuration: one JSON document drives simulate -> record -> preprocess -> train -> eval.

Keys may also be overridden with dotted paths (``beams.count=36``); see
:func:`apply_overrides`.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os

from .bus import Stream
from .fusion import FusionConfig
from .nn.training import TrainConfig
from .preprocess import PreprocessConfig
from .scene import RadioConfig, build_codebook, load_scene, scene_from_dict
from .sensors import DEFAULT_RATES, ClockModel, SensorConfig, Trajectory

STREAM_NAMES = {
    "camera": Stream.CAMERA,
    "lidar": Stream.LIDAR,
    "imu": Stream.IMU,
    "mmwave": Stream.MMWAVE,
    "position": Stream.POSITION,
    "camera_rear": Stream.CAMERA_REAR,
}

DEFAULT_ABLATIONS = [
    {"name": "L", "modalities": ["lidar"]},
    {"name": "L+C", "modalities": ["lidar", "camera"]},
    {"name": "L+C+I", "modalities": ["lidar", "camera", "imu_position"]},
]

DEFAULTS = {
    "seed": 0,
    "trajectory": {"waypoints": [[2, 1], [10, 1], [10, 6], [2, 6]], "speed": 0.9, "loop": True},
    "session": {
        "duration": 10.0,
        "rates": {"camera": 30, "lidar": 15, "imu": 100, "mmwave": 10, "position": 100},
        "clocks": {},
        "camera": {"width": 160, "height": 90, "fov_deg": 90, "rear": False},
        "lidar": {"rays": 1600, "max_range": 12.0},
        "imu": {"accel_noise_std": 0.0, "diff_step": 0.01},
    },
    "beams": {"count": 36, "mainlobe_deg": 10.0, "gain_db": 15.0, "sidelobe_db": -10.0},
    "radio": {"carrier_hz": 60e9, "tx_power_dbm": 10.0, "noise_floor_dbm": -70.0, "snr_floor_db": -40.0},
    "preprocess": {"camera_downsample": 4, "imu_window": 10, "train_fraction": 0.8, "per_beam_normalization": False},
    "model": {},
    "train": {"learning_rate": 1e-3, "batch_size": 32, "epochs": 8, "optimizer": "adam", "shuffle": "blocks"},
    "ablations": DEFAULT_ABLATIONS,
    "seeds": [0],
    "baselines": ["exhaustive-oracle", "geometric-bearing", "knn-fingerprint", "majority-class"],
    "knn_k": 5,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values parse as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def load_config(path=None, overrides=None, base_dir=None) -> dict:
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = json.load(f)
        base_dir = base_dir or os.path.dirname(os.path.abspath(path))
    cfg = apply_overrides(_merge(DEFAULTS, raw), overrides)
    if "scene" not in cfg and "scene_path" in cfg:
        sp = cfg["scene_path"]
        if base_dir:
            sp = os.path.join(base_dir, sp)
        cfg["scene"] = load_scene(sp).to_dict()
    if "scene" not in cfg:
        raise ValueError("config needs a 'scene' object or 'scene_path'")
    return cfg


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# -- typed views -------------------------------------------------------------------


def scene_of(cfg):
    return scene_from_dict(cfg["scene"])


def trajectory_of(cfg):
    t = cfg["trajectory"]
    return Trajectory(t["waypoints"], t["speed"], t.get("loop", False))


def codebook_of(cfg):
    b = cfg["beams"]
    return build_codebook(int(b["count"]), math.radians(b["mainlobe_deg"]), b["gain_db"], b["sidelobe_db"])


def radio_of(cfg):
    return RadioConfig(**cfg["radio"])


def sensor_config_of(cfg) -> SensorConfig:
    s = cfg["session"]
    rates = {STREAM_NAMES[k]: float(v) for k, v in s["rates"].items()}
    for k in DEFAULT_RATES:
        rates.setdefault(k, DEFAULT_RATES[k])
    clocks = {}
    for name, c in s.get("clocks", {}).items():
        clocks[STREAM_NAMES[name]] = ClockModel(int(c.get("offset_ns", 0)), float(c.get("jitter_std_ns", 0.0)),
                                                int(c.get("seed", 0)))
    cam, lid, imu = s["camera"], s["lidar"], s["imu"]
    return SensorConfig(
        camera_width=int(cam["width"]),
        camera_height=int(cam["height"]),
        camera_fov=math.radians(cam["fov_deg"]),
        rear_camera=bool(cam.get("rear", False)),
        lidar_rays=int(lid["rays"]),
        max_range=float(lid["max_range"]),
        accel_noise_std=float(imu["accel_noise_std"]),
        imu_diff_step=float(imu["diff_step"]),
        rates=rates,
        clocks=clocks,
    )


def preprocess_config_of(cfg) -> PreprocessConfig:
    return PreprocessConfig(**cfg["preprocess"])


def fusion_config_of(cfg, modalities) -> FusionConfig:
    m = dict(cfg["model"])
    m["modalities"] = tuple(modalities)
    m.setdefault("range_scale", cfg["session"]["lidar"]["max_range"])
    m.setdefault("n_beams", int(cfg["beams"]["count"]))
    return FusionConfig(**m)


def train_config_of(cfg, seed) -> TrainConfig:
    t = dict(cfg["train"])
    t["seed"] = int(seed)
    return TrainConfig(**t)
