"""Baselines, top-K reports, and the end-to-end experiment runner."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from . import experiment as X
from .bus import Bus, LogHeader, REGISTERED_STREAMS, read_log, write_log
from .fusion import FusionModel, InputShapes, predict_windows, split_windows, train_fusion
from .metrics import topk_accuracy, topk_curve
from .nn.training import load_checkpoint, load_model_tensors, model_tensors, save_checkpoint
from .preprocess import build_dataset, load_dataset, save_dataset, write_summary_csv
from .scene import BeamCodebook
from .sensors import run_session

log = logging.getLogger(__name__)

KS = (1, 2, 3, 4, 5)
BASELINES = ("exhaustive-oracle", "geometric-bearing", "knn-fingerprint", "majority-class")

STAGE_EXIT_CODES = {"config": 2, "simulate": 10, "record": 11, "preprocess": 12, "train": 13, "eval": 14, "report": 15}


class MissingContext(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self):
        return STAGE_EXIT_CODES.get(self.stage, 1)


# -- baselines --------------------------------------------------------------------


def _onehot(idx, n):
    p = np.zeros(n)
    p[idx] = 1.0
    return p


def oracle_predict(labels, n_beams=36):
    """The exhaustive sweep itself: always the measured best beam."""
    return np.stack([_onehot(int(y), n_beams) for y in labels]) if len(labels) else np.zeros((0, n_beams))


def geometric_predict(samples, start_position, bs_position, codebook: BeamCodebook):
    """Point the beam straight at the BS from the dead-reckoned pose."""
    out = []
    for s in samples:
        x = np.asarray(start_position, dtype=float) + s.rel_position
        bearing = math.atan2(bs_position[1] - x[1], bs_position[0] - x[0])
        out.append(_onehot(codebook.nearest_beam(bearing - s.yaw), len(codebook)))
    return np.stack(out) if out else np.zeros((0, len(codebook)))


def knn_predict(train_positions, train_labels, query_positions, k=5, n_beams=36):
    """Label histogram of the k nearest training positions (stable distance order)."""
    train_positions = np.asarray(train_positions, dtype=float)
    train_labels = np.asarray(train_labels)
    if len(train_positions) == 0:
        raise MissingContext("k-NN baseline needs a training set")
    k = min(k, len(train_positions))
    out = []
    for q in np.atleast_2d(query_positions):
        d = np.hypot(*(train_positions - q).T)
        nn = np.argsort(d, kind="stable")[:k]
        out.append(np.bincount(train_labels[nn], minlength=n_beams) / k)
    return np.stack(out)


def majority_predict(train_labels, n_queries, n_beams=36):
    if len(train_labels) == 0:
        raise MissingContext("majority baseline needs training labels")
    mode = int(np.argmax(np.bincount(np.asarray(train_labels), minlength=n_beams)))
    return np.tile(_onehot(mode, n_beams), (n_queries, 1))


def baseline_predict(kind, test_samples, train_samples=(), *, start_position=None, bs_position=None,
                     codebook=None, k=5, n_beams=36):
    """Probability vectors from one of the non-learned predictors."""
    if kind == "exhaustive-oracle":
        return oracle_predict([s.label for s in test_samples], n_beams)
    if kind == "geometric-bearing":
        if start_position is None or bs_position is None or codebook is None:
            raise MissingContext("geometric baseline needs start position, BS position and codebook")
        return geometric_predict(test_samples, start_position, bs_position, codebook)
    if kind == "knn-fingerprint":
        return knn_predict([s.rel_position for s in train_samples], [s.label for s in train_samples],
                           [s.rel_position for s in test_samples], k, n_beams)
    if kind == "majority-class":
        return majority_predict([s.label for s in train_samples], len(test_samples), n_beams)
    raise ValueError(f"unknown baseline {kind!r}")


# -- report -----------------------------------------------------------------------


@dataclass
class TopKRow:
    name: str
    kind: str  # "model" | "baseline"
    seed: int
    topk: list
    n: int


@dataclass
class TopKReport:
    rows: list = field(default_factory=list)
    label_histogram: list = field(default_factory=list)
    n_train: int = 0
    n_test: int = 0

    def add(self, name, kind, seed, probs, labels):
        self.rows.append(TopKRow(name, kind, seed, topk_curve(probs, labels, KS), len(labels)))

    def mean_topk(self, name) -> list:
        rows = [r.topk for r in self.rows if r.name == name]
        return np.mean(rows, axis=0).tolist()

    def names(self, kind=None):
        seen = []
        for r in self.rows:
            if (kind is None or r.kind == kind) and r.name not in seen:
                seen.append(r.name)
        return seen

    def to_dict(self):
        return {
            "rows": [r.__dict__ for r in self.rows],
            "label_histogram": self.label_histogram,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }

    @classmethod
    def from_dict(cls, d):
        return cls([TopKRow(**r) for r in d["rows"]], d["label_histogram"], d["n_train"], d["n_test"])

    def write(self, out_dir):
        """report.csv, report.json, and the top-K plot data (topk.dat + topk.gp)."""
        with open(os.path.join(out_dir, "report.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["configuration", "kind", "seed", "n_test"] + [f"top{k}" for k in KS])
            for r in self.rows:
                w.writerow([r.name, r.kind, r.seed, r.n] + [f"{v:.6f}" for v in r.topk])
            for name in self.names():
                kind = next(r.kind for r in self.rows if r.name == name)
                w.writerow([name, kind, "mean", self.n_test] + [f"{v:.6f}" for v in self.mean_topk(name)])
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "topk.dat"), "w") as f:
            f.write("# configuration " + " ".join(f"top{k}" for k in KS) + "\n")
            for name in self.names("model"):
                f.write(f'"{name}" ' + " ".join(f"{v:.6f}" for v in self.mean_topk(name)) + "\n")
        with open(os.path.join(out_dir, "topk.gp"), "w") as f:
            f.write(GNUPLOT_SCRIPT)


GNUPLOT_SCRIPT = """\
set terminal pngcairo size 800,500
set output 'topk.png'
set style data histograms
set style histogram clustered gap 1
set style fill solid border -1
set yrange [0:1]
set ylabel 'accuracy'
set key top left
plot for [col=2:6] 'topk.dat' using col:xtic(1) title columnheader(col)
"""


# -- pipeline ---------------------------------------------------------------------


def _stage(name):
    def wrap(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        return run

    return wrap


def simulate_records(cfg):
    return run_session(X.scene_of(cfg), X.trajectory_of(cfg), X.codebook_of(cfg), X.sensor_config_of(cfg),
                       float(cfg["session"]["duration"]), int(cfg["seed"]), X.radio_of(cfg))


def session_header(cfg) -> LogHeader:
    return LogHeader(scene_hash=X.scene_of(cfg).digest(), config_hash=X.digest(session_key(cfg)), start_time=0)


def session_key(cfg):
    return {k: cfg[k] for k in ("seed", "scene", "trajectory", "session", "beams", "radio")}


def record_via_bus(records, path, header: LogHeader, maxsize=256) -> int:
    """Publish records on an in-process bus and persist them from a subscriber thread."""
    bus = Bus(maxsize)
    sub = bus.subscribe(REGISTERED_STREAMS)
    result = {}

    def writer():
        try:
            result["n"] = write_log(path, header, sub)
        except BaseException as exc:  # surfaced in the caller
            result["error"] = exc

    th = threading.Thread(target=writer, name="log-writer")
    th.start()
    try:
        for rec in records:
            bus.publish(rec)
    finally:
        bus.close()
        th.join()
    if "error" in result:
        raise result["error"]
    return result["n"]


def load_fusion_model(path):
    tensors, meta = load_checkpoint(path)
    cfg = X.FusionConfig(**meta["fusion"])
    shapes = InputShapes(tuple(meta["shapes"]["camera"]), meta["shapes"]["lidar"], tuple(meta["shapes"]["imu"]))
    model = FusionModel(cfg, shapes)
    load_model_tensors(model, tensors)
    return model, meta


def save_fusion_model(path, model: FusionModel, meta: dict):
    full = dict(meta)
    full["fusion"] = model.config.to_dict()
    full["shapes"] = {"camera": list(model.shapes.camera), "lidar": model.shapes.lidar, "imu": list(model.shapes.imu)}
    save_checkpoint(path, model_tensors(model), full)


class _Stages:
    """Content-hash cache: a stage is skipped when its key and outputs are unchanged."""

    def __init__(self, out_dir, enabled=True):
        self.path = os.path.join(out_dir, ".stages.json")
        self.out_dir = out_dir
        self.keys = {}
        if enabled:
            try:
                with open(self.path) as f:
                    self.keys = json.load(f)
            except (OSError, ValueError):
                pass

    def fresh(self, name, key, outputs):
        return self.keys.get(name) == key and all(os.path.exists(os.path.join(self.out_dir, o)) for o in outputs)

    def mark(self, name, key):
        self.keys[name] = key
        with open(self.path, "w") as f:
            json.dump(self.keys, f, indent=1, sort_keys=True)


def run_experiment(cfg: dict, out_dir, use_cache: bool = True) -> TopKReport:
    """simulate -> record -> preprocess -> train/eval per ablation and seed -> report."""
    os.makedirs(out_dir, exist_ok=True)
    stages = _Stages(out_dir, enabled=use_cache)

    log_path = os.path.join(out_dir, "session.hwkl")
    sim_key = X.digest(session_key(cfg))
    if not stages.fresh("record", sim_key, ["session.hwkl"]):
        _simulate_and_record(cfg, log_path)
        stages.mark("record", sim_key)

    pre_key = X.digest([sim_key, cfg["preprocess"]])
    if not stages.fresh("preprocess", pre_key, ["dataset.bin", "dataset.csv"]):
        _preprocess(cfg, log_path, out_dir)
        stages.mark("preprocess", pre_key)
    ds = _stage("preprocess")(load_dataset)(os.path.join(out_dir, "dataset.bin"))

    report = _evaluate(cfg, ds, out_dir, stages, pre_key)
    _stage("report")(report.write)(out_dir)
    return report


def _tagged(records, stage):
    try:
        yield from records
    except Exception as exc:
        raise StageError(stage, exc) from exc


@_stage("simulate")
def _simulate_and_record(cfg, log_path):
    records = _tagged(simulate_records(cfg), "simulate")
    _stage("record")(record_via_bus)(records, log_path, session_header(cfg))


@_stage("preprocess")
def _preprocess(cfg, log_path, out_dir):
    session = read_log(log_path)
    ds = build_dataset(session, X.preprocess_config_of(cfg))
    save_dataset(os.path.join(out_dir, "dataset.bin"), ds)
    write_summary_csv(os.path.join(out_dir, "dataset.csv"), ds)


def _evaluate(cfg, ds, out_dir, stages, pre_key) -> TopKReport:
    samples = ds.samples
    train_fraction = float(cfg["preprocess"]["train_fraction"])
    report = TopKReport()
    labels_all = [s.label for s in samples]
    report.label_histogram = np.bincount(labels_all, minlength=int(cfg["beams"]["count"])).tolist()

    for ab in cfg["ablations"]:
        fcfg = _stage("config")(X.fusion_config_of)(cfg, ab["modalities"])
        for seed in cfg["seeds"]:
            tcfg = X.train_config_of(cfg, seed)
            tag = f"{ab['name']}_seed{seed}".replace("+", "")
            ckpt, mpath = f"model_{tag}.ckpt", f"metrics_{tag}.json"
            key = X.digest([pre_key, fcfg.to_dict(), tcfg.__dict__, train_fraction])
            if not stages.fresh(f"train:{tag}", key, [ckpt, mpath]):
                model, m = _stage("train")(train_fusion)(samples, fcfg, tcfg, train_fraction)
                save_fusion_model(os.path.join(out_dir, ckpt), model,
                                  {"train": tcfg.__dict__, "ablation": ab["name"]})
                with open(os.path.join(out_dir, mpath), "w") as f:
                    json.dump({"loss_curve": m.loss_curve, "train_accuracy": m.train_accuracy,
                               "test_topk": m.test_topk, "n_test_windows": m.n_test_windows,
                               "n_train_samples": m.n_train_samples, "n_test_samples": m.n_test_samples},
                              f, indent=1, sort_keys=True)
                stages.mark(f"train:{tag}", key)
            with open(os.path.join(out_dir, mpath)) as f:
                m = json.load(f)
            report.rows.append(TopKRow(ab["name"], "model", int(seed), m["test_topk"], m["n_test_windows"]))
            report.n_train, report.n_test = m["n_train_samples"], m["n_test_windows"]

    _stage("eval")(_evaluate_baselines)(cfg, samples, train_fraction, report)
    return report


def baseline_split(cfg, samples, train_fraction):
    """Train samples and the test anchors the models are scored on (final anchors of test windows)."""
    window = X.fusion_config_of(cfg, ["lidar"]).window
    n_train = int(math.floor(train_fraction * len(samples)))
    return samples[:n_train], samples[n_train + window - 1 :]


def evaluate_baseline(cfg, kind, train, test):
    return baseline_predict(
        kind, test, train,
        start_position=X.trajectory_of(cfg).waypoints[0],
        bs_position=X.scene_of(cfg).bs_position,
        codebook=X.codebook_of(cfg),
        k=int(cfg["knn_k"]),
        n_beams=int(cfg["beams"]["count"]),
    )


def _evaluate_baselines(cfg, samples, train_fraction, report):
    train, test = baseline_split(cfg, samples, train_fraction)
    labels = np.array([s.label for s in test])
    for kind in cfg["baselines"]:
        report.add(kind, "baseline", 0, evaluate_baseline(cfg, kind, train, test), labels)
    if not report.n_test:
        report.n_train, report.n_test = len(train), len(test)


def evaluate_checkpoint(model_path, dataset_path, train_fraction=0.8):
    """Top-K of a saved model on the chronological test split of a dataset file."""
    model, _ = load_fusion_model(model_path)
    ds = load_dataset(dataset_path)
    _, test_set, _ = split_windows(ds.samples, model.config, train_fraction)
    probs = predict_windows(model, test_set)
    labels = test_set.labels[test_set.ends]
    return {f"top{k}": topk_accuracy(probs, labels, k) for k in KS}

