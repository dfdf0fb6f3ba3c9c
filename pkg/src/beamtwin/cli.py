"""Command-line entry point: ``beamtwin <subcommand>``.

``simulate`` writes the session's frames to stdout, so a session can be piped
straight into ``record``::

    beamtwin simulate -c exp.json | beamtwin record -o session.hwkl
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import experiment as X
from .bus import Bus, LogHeader, Stream, encode_frame, read_frames, read_log
from .evaluation import (
    BASELINES,
    STAGE_EXIT_CODES,
    StageError,
    TopKReport,
    baseline_split,
    evaluate_baseline,
    evaluate_checkpoint,
    load_fusion_model,
    record_via_bus,
    run_experiment,
    save_fusion_model,
    session_header,
    simulate_records,
)
from .fusion import predict, train_fusion
from .metrics import topk_curve
from .preprocess import PreprocessConfig, build_dataset, load_dataset, save_dataset, write_summary_csv


def _config(args):
    return X.load_config(getattr(args, "config", None), getattr(args, "set", None))


def cmd_simulate(args):
    cfg = _config(args)
    out = open(args.output, "wb") if args.output else sys.stdout.buffer
    n = 0
    try:
        for rec in simulate_records(cfg):
            out.write(encode_frame(rec))
            n += 1
    finally:
        if args.output:
            out.close()
    logging.info("simulated %d records", n)


def cmd_record(args):
    cfg = _config(args) if args.config else None
    header = session_header(cfg) if cfg else LogHeader()
    src = open(args.input, "rb") if args.input else sys.stdin.buffer
    try:
        n = record_via_bus(read_frames(src), args.output, header)
    finally:
        if args.input:
            src.close()
    print(f"recorded {n} frames to {args.output}")


def cmd_inspect(args):
    log = read_log(args.log)
    print(json.dumps(log.header.__dict__, sort_keys=True))
    by = {}
    for r in log.records:
        by.setdefault(r.stream_id, []).append(r.timestamp)
    for sid in sorted(by):
        ts = np.asarray(by[sid], dtype=np.int64)
        span = (ts[-1] - ts[0]) / 1e9
        rate = (len(ts) - 1) / span if span > 0 else float("nan")
        print(f"{Stream(sid).name.lower():12s} n={len(ts):7d} first={ts[0]} last={ts[-1]} rate={rate:.2f} Hz")
    if log.truncated:
        print("warning: trailing partial frame (log truncated)")


def cmd_replay(args):
    log = read_log(args.log)
    wanted = {int(s) for s in args.streams.split(",")} if args.streams else {int(s) for s in Stream}
    bus = Bus()
    sub = bus.subscribe(wanted)
    out = sys.stdout.buffer
    import threading

    def pump():
        t0 = time.monotonic()
        first = None
        for rec in log.records:
            if args.realtime:
                first = rec.timestamp if first is None else first
                delay = (rec.timestamp - first) / 1e9 - (time.monotonic() - t0)
                if delay > 0:
                    time.sleep(delay)
            bus.publish(rec)
        bus.close()

    th = threading.Thread(target=pump)
    th.start()
    for rec in sub:
        if args.text:
            print(f"{rec.timestamp} {Stream(rec.stream_id).name.lower()} {len(rec.payload)}")
        else:
            out.write(encode_frame(rec))
    th.join()


def cmd_preprocess(args):
    cfg = _config(args) if args.config else None
    pcfg = X.preprocess_config_of(cfg) if cfg else PreprocessConfig(camera_downsample=args.downsample)
    ds = build_dataset(read_log(args.log), pcfg)
    save_dataset(args.output, ds)
    if args.csv:
        write_summary_csv(args.csv, ds)
    print(f"{len(ds.samples)} samples from {ds.n_anchors} anchors; dropped {dict(ds.drops)}")


def cmd_train(args):
    cfg = _config(args)
    ds = load_dataset(args.dataset)
    fcfg = X.fusion_config_of(cfg, args.modalities.split(","))
    tcfg = X.train_config_of(cfg, args.seed)
    model, m = train_fusion(ds.samples, fcfg, tcfg, cfg["preprocess"]["train_fraction"])
    save_fusion_model(args.output, model, {"train": tcfg.__dict__})
    print(json.dumps({"loss_curve": m.loss_curve, "test_topk": m.test_topk}))


def cmd_eval(args):
    if args.baseline:
        cfg = _config(args)
        ds = load_dataset(args.dataset)
        train, test = baseline_split(cfg, ds.samples, cfg["preprocess"]["train_fraction"])
        probs = evaluate_baseline(cfg, args.baseline, train, test)
        curve = topk_curve(probs, [s.label for s in test])
        print(json.dumps({f"top{k}": v for k, v in zip(range(1, 6), curve)}))
    else:
        if not args.model:
            raise SystemExit("eval needs --model or --baseline")
        print(json.dumps(evaluate_checkpoint(args.model, args.dataset)))


def cmd_predict(args):
    model, _ = load_fusion_model(args.model)
    ds = load_dataset(args.dataset)
    w = model.config.window
    end = args.index if args.index >= 0 else len(ds.samples) + args.index
    window = ds.samples[end - w + 1 : end + 1]
    p = predict(model, window)
    order = np.argsort(-p, kind="stable")[:5]
    print(json.dumps({"timestamp": window[-1].timestamp, "label": window[-1].label,
                      "top5": order.tolist(), "probabilities": p[order].tolist()}))


def cmd_report(args):
    with open(os.path.join(args.dir, "report.json")) as f:
        report = TopKReport.from_dict(json.load(f))
    report.write(args.dir)
    for name in report.names():
        print(f"{name:18s} " + " ".join(f"{v:.3f}" for v in report.mean_topk(name)))


def cmd_all(args):
    cfg = _config(args)
    report = run_experiment(cfg, args.output, use_cache=not args.no_cache)
    for name in report.names():
        print(f"{name:18s} " + " ".join(f"{v:.3f}" for v in report.mean_topk(name)))


def build_parser():
    p = argparse.ArgumentParser(prog="beamtwin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("-c", "--config", required=required, help="experiment JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")

    sp = sub.add_parser("simulate", help="run the sensor session, emit frames")
    with_config(sp, True)
    sp.add_argument("-o", "--output", help="frame file (default stdout)")
    sp.set_defaults(func=cmd_simulate, stage="simulate")

    sp = sub.add_parser("record", help="persist a frame stream as a session log")
    with_config(sp)
    sp.add_argument("-i", "--input", help="frame file (default stdin)")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_record, stage="record")

    sp = sub.add_parser("inspect", help="summarize a session log")
    sp.add_argument("log")
    sp.set_defaults(func=cmd_inspect, stage="record")

    sp = sub.add_parser("replay", help="re-publish a session log through the bus")
    sp.add_argument("log")
    sp.add_argument("--streams", help="comma-separated stream ids")
    sp.add_argument("--realtime", action="store_true", help="pace by timestamps")
    sp.add_argument("--text", action="store_true", help="print one line per record instead of frames")
    sp.set_defaults(func=cmd_replay, stage="record")

    sp = sub.add_parser("preprocess", help="align a session log into a dataset")
    with_config(sp)
    sp.add_argument("log")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--csv")
    sp.add_argument("--downsample", type=int, default=4)
    sp.set_defaults(func=cmd_preprocess, stage="preprocess")

    sp = sub.add_parser("train", help="train one fusion model")
    with_config(sp, True)
    sp.add_argument("dataset")
    sp.add_argument("--modalities", default="camera,lidar,imu_position")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_train, stage="train")

    sp = sub.add_parser("eval", help="top-K of a checkpoint or baseline on the test split")
    with_config(sp)
    sp.add_argument("dataset")
    sp.add_argument("--model")
    sp.add_argument("--baseline", choices=BASELINES)
    sp.set_defaults(func=cmd_eval, stage="eval")

    sp = sub.add_parser("predict", help="single-window inference")
    sp.add_argument("dataset")
    sp.add_argument("model")
    sp.add_argument("--index", type=int, default=-1, help="final anchor of the window")
    sp.set_defaults(func=cmd_predict, stage="eval")

    sp = sub.add_parser("report", help="rewrite report files from report.json")
    sp.add_argument("dir")
    sp.set_defaults(func=cmd_report, stage="report")

    sp = sub.add_parser("all", help="run the full experiment")
    with_config(sp, True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--no-cache", action="store_true")
    sp.set_defaults(func=cmd_all, stage="config")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error ({args.stage}): {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES[args.stage]
    return 0


if __name__ == "__main__":
    sys.exit(main())
