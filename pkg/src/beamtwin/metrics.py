"""Top-K accuracy with deterministic tie-breaking."""
import numpy as np


def topk_indices(probs, k):
    """The k most probable indices per row; equal probabilities rank the lower index first."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :k]


def topk_accuracy(probs, labels, k) -> float:
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.asarray(labels)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(probs) != len(labels):
        raise ValueError(f"{len(probs)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        return float("nan")
    hits = (topk_indices(probs, k) == labels[:, None]).any(axis=1)
    return float(hits.mean())


def topk_curve(probs, labels, ks=(1, 2, 3, 4, 5)) -> list:
    return [topk_accuracy(probs, labels, k) for k in ks]
