"""Size, compute and accuracy accounting.

Every number here is a pure function of the model's shapes and masks.
Sizes count conv/dense weights only; a masked weight counts as removed
whatever its stored value.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .models import ModelGraph, iter_weight_layers

MADDS_FORMULA = (
    "one multiply-add per multiply-accumulate; dense: in*out; "
    "conv2d: out_h*out_w*kh*kw*cin*cout; pruned counts replace the weight count "
    "with nnz(mask) (dense: nnz, conv2d: nnz*out_h*out_w); biases, relu, pooling: 0"
)
SIZE_FORMULA = "conv/dense weights only, biases excluded; size = nnz(mask)"


@dataclass(frozen=True)
class EfficiencyReport:
    params_total: int
    params_nnz: int
    madds_dense_model: int
    madds_pruned_model: int
    compression_ratio: float
    theoretical_speedup: float
    fraction_pruned: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AccuracyReport:
    top1: float
    top5: float
    n_examples: int


def layer_madds(model: ModelGraph) -> list[tuple[str, int, int]]:
    """Per conv/dense layer: (name, dense madds, pruned madds)."""
    rows = []
    for layer, in_shape, out_shape in iter_weight_layers(model):
        nnz = layer.weight.nnz
        if layer.kind == "dense":
            rows.append((layer.name, layer.in_features * layer.out_features, nnz))
        elif layer.kind == "conv2d":
            positions = out_shape[1] * out_shape[2]
            dense = positions * layer.kh * layer.kw * layer.cin * layer.cout
            rows.append((layer.name, dense, nnz * positions))
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return rows


def count_madds(model: ModelGraph) -> tuple[int, int]:
    rows = layer_madds(model)
    return sum(r[1] for r in rows), sum(r[2] for r in rows)


def count_params(model: ModelGraph) -> tuple[int, int]:
    tensors = model.weight_tensors()
    return sum(p.numel for p in tensors), sum(p.nnz for p in tensors)


def compression_ratio(params_total: int, params_nnz: int) -> float:
    if params_nnz <= 0:
        raise ZeroDivisionError("compression ratio undefined for a model with no remaining weights")
    return params_total / params_nnz


def theoretical_speedup(madds_dense: int, madds_pruned: int) -> float:
    if madds_pruned <= 0:
        raise ZeroDivisionError("speedup undefined with zero remaining multiply-adds")
    return madds_dense / madds_pruned


def compression_from_fraction_pruned(fraction: float) -> float:
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction pruned must lie in [0, 1), got {fraction}")
    return 1.0 / (1.0 - fraction)


def fraction_pruned_from_compression(ratio: float) -> float:
    if ratio < 1:
        raise ValueError(f"compression ratio must be >= 1, got {ratio}")
    return 1.0 - 1.0 / ratio


def efficiency_report(model: ModelGraph) -> EfficiencyReport:
    total, nnz = count_params(model)
    dense, pruned = count_madds(model)
    return EfficiencyReport(
        params_total=total,
        params_nnz=nnz,
        madds_dense_model=dense,
        madds_pruned_model=pruned,
        compression_ratio=compression_ratio(total, nnz),
        theoretical_speedup=theoretical_speedup(dense, pruned),
        fraction_pruned=1.0 - nnz / total,
    )


def topk_accuracy(logits, labels, k: int) -> float:
    """Fraction of rows whose label ranks within the ``k`` largest logits.

    Equal logits rank the lower class index first.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} do not match labels {labels.shape}")
    if not 1 <= k <= logits.shape[1]:
        raise ValueError(f"k={k} outside [1, {logits.shape[1]}]")
    if len(labels) == 0:
        raise ValueError("no examples")
    true = logits[np.arange(len(labels)), labels][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    rank = (logits > true).sum(axis=1) + ((logits == true) & (idx < labels[:, None])).sum(axis=1)
    return float(np.mean(rank < k))


def accuracy_report(logits, labels) -> AccuracyReport:
    """Top-1 and top-5 (top-``class_count`` when there are fewer than five classes)."""
    logits = np.asarray(logits)
    k5 = min(5, logits.shape[1])
    return AccuracyReport(topk_accuracy(logits, labels, 1), topk_accuracy(logits, labels, k5), len(labels))
