"""Train the three modality ablations on a short session and compare top-K.

Two minutes of driving is small, so the numbers are noisy; the full
10-minute experiment is `beamtwin all -c configs/nlos_10min.json -o out`.
"""
import os

from beamtwin import experiment as X
from beamtwin.bus import LogHeader, SessionLog
from beamtwin.evaluation import simulate_records
from beamtwin.fusion import train_fusion
from beamtwin.preprocess import build_dataset

here = os.path.dirname(os.path.abspath(__file__))
cfg = X.load_config(os.path.join(here, "..", "configs", "nlos_10min.json"), ["session.duration=120", "train.epochs=5"])
samples = build_dataset(SessionLog(LogHeader(), list(simulate_records(cfg))), X.preprocess_config_of(cfg)).samples
print(f"{len(samples)} samples")

for ab in cfg["ablations"]:
    model, m = train_fusion(samples, X.fusion_config_of(cfg, ab["modalities"]), X.train_config_of(cfg, 0))
    curve = " ".join(f"{v:.3f}" for v in m.test_topk)
    print(f"{ab['name']:6s} loss {m.loss_curve[0]:.2f} -> {m.loss_curve[-1]:.2f}   top-1..5 {curve}")
