"""Finite-difference check of every layer's backward pass."""
from beamtwin.nn.gradcheck import LAYER_CASES, layer_trials, softmax_ce_trials

for name in LAYER_CASES:
    errs = layer_trials(name, trials=20)
    print(f"{name:16s} worst relative error {max(errs):.1e}")
print(f"{'softmax+CE':16s} worst relative error {max(softmax_ce_trials(20)):.1e}")
