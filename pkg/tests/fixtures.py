"""Deterministic fixtures shared between unit and acceptance tests."""

import numpy as np

from prunebench.models import build


def half_masked(model, names):
    """Mask the first half (flat order) of each named weight tensor."""
    params = model.named_params()
    for n in names:
        p = params[n]
        flat = np.ones(p.numel, dtype=np.uint8)
        flat[: p.numel // 2] = 0
        p.mask = flat.reshape(p.shape)
    return model


def divergent_lenet_pair():
    """Two lenet_conv mask sets: ``dense_heavy`` prunes fc1, ``conv_heavy`` prunes both convs.

    Hand arithmetic (weights / madds per layer):
      conv1 150 / 86,400   conv2 2,400 / 153,600   fc1 30,720   fc2 10,080   fc3 840
      total weights 44,190, dense madds 281,640
      dense_heavy: nnz 28,830 -> compression 44190/28830; madds 266,280 -> speedup 281640/266280
      conv_heavy:  nnz 42,915 -> compression 44190/42915; madds 161,640 -> speedup 281640/161640
    """
    return (
        half_masked(build("lenet_conv", 10), ["fc1.weight"]),
        half_masked(build("lenet_conv", 10), ["conv1.weight", "conv2.weight"]),
    )


def result_row(strategy="global_magnitude", target=2.0, seed=0, top1=0.9, **kw):
    row = {
        "fingerprint": "f", "dataset": "synth_blobs", "arch": "mlp_300_100", "strategy": strategy,
        "target_compression": float(target), "achieved_compression": float(target), "speedup": float(target),
        "seed": seed, "top1_before": 0.95, "top1_after": top1, "top5_before": 1.0, "top5_after": 1.0,
        "epochs_finetuned": 3, "iterations": 1, "wall_seconds": 0.1, "status": "ok",
    }
    row.update(kw)
    return row


def complete_rows():
    """A result set that satisfies every automatable checklist item."""
    return [
        result_row(s, c, seed)
        for s in ("global_magnitude", "random")
        for c in (2, 4, 8, 16, 32)
        for seed in (0, 1, 2)
    ]


def lint_violations():
    """One result set per checklist key, each breaking only that item."""
    nan = float("nan")
    base = complete_rows
    return {
        "operating_points": [r for r in base() if r["target_compression"] != 8],
        "extreme_compression": [r for r in base() if r["target_compression"] < 16]
        + [result_row(s, c, seed) for s in ("global_magnitude", "random") for c in (3, 5) for seed in (0, 1, 2)],
        "multiple_runs": [r for r in base() if r["seed"] != 2],
        "error_bars": [r if r["seed"] == 0 else {**r, "status": "failed: DivergenceError", "top1_after": nan} for r in base()],
        "raw_accuracy": [{**r, "top1_after": nan} if r["seed"] == 1 and r["target_compression"] == 4 else r for r in base()],
        "flop_counts": [{**r, "speedup": nan} for r in base()],
        "control_metrics": [{**r, "top1_before": nan} if r["strategy"] == "random" else r for r in base()],
        "random_baseline": [r for r in base() if r["strategy"] != "random"],
        "magnitude_baseline": [{**r, "strategy": "global_gradient"} if r["strategy"] == "global_magnitude" else r for r in base()],
    }
