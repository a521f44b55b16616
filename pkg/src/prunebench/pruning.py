"""Saliency scoring, mask selection and the prune / fine-tune loop.

Score maps are ``{tensor name: float64 array}`` in layer order.  Positions
that are already masked score ``-inf`` so selection only ever adds zeros to
a mask.  Counts are ``round-half-to-even(fraction * n)``; among equal
scores, lower (layer index, flat index) is pruned first.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from .data import Dataset
from .metrics import MADDS_FORMULA, efficiency_report
from .models import ModelGraph, ParamTensor
from .seeds import SeedLineage
from .tensor import Tensor, softmax_cross_entropy
from .training import DivergenceError, OptimizerCfg, evaluate, finetune, make_optimizer

STRATEGIES = ("global_magnitude", "layerwise_magnitude", "global_gradient", "layerwise_gradient", "random")

ScoreMap = dict[str, np.ndarray]
MaskMap = dict[str, np.ndarray]


class InfeasibleCompressionError(ValueError):
    pass


@dataclass(frozen=True)
class PruneAction:
    strategy: str
    target_compression: float
    iterations: int = 1
    exclude_classifier: bool = True
    score_batch_size: int = 64

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not self.target_compression > 1:
            raise ValueError(f"target compression must exceed 1, got {self.target_compression}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.score_batch_size < 1:
            raise ValueError("score_batch_size must be >= 1")

    @property
    def scope(self) -> str:
        return "global" if self.strategy.startswith("global") else "layerwise"


def round_half_even(x: float) -> int:
    return int(round(x))


def prunable_tensors(model: ModelGraph, exclude_classifier: bool = True) -> list[ParamTensor]:
    out = []
    for layer in model.layers:
        if exclude_classifier and layer.classifier:
            continue
        out.extend(p for p in layer.params() if p.prunable)
    return out


def current_masks(tensors) -> MaskMap:
    return {p.name: p.mask.copy() for p in tensors}


# -- scoring ----------------------------------------------------------------

def _sentinel(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask.astype(bool), scores, -np.inf)


def score_magnitude(tensors) -> ScoreMap:
    """|w| at unmasked positions."""
    return {p.name: _sentinel(np.abs(p.weights.data.astype(np.float64)), p.mask) for p in tensors}


def score_gradient_magnitude(model: ModelGraph, images: np.ndarray, labels: np.ndarray, tensors=None) -> ScoreMap:
    """|w * dL/dw| from exactly one forward/backward pass on the given minibatch."""
    if len(labels) == 0:
        raise ValueError("gradient scoring needs a non-empty batch")
    tensors = model.weight_tensors() if tensors is None else tensors
    model.zero_grad()
    logits = model.forward(Tensor(images, dtype=model.dtype))
    model.backward(softmax_cross_entropy(logits, labels))
    scores = {}
    for p in tensors:
        s = np.abs(p.weights.data.astype(np.float64) * p.grad.astype(np.float64))
        scores[p.name] = _sentinel(s, p.mask)
    model.zero_grad()
    return scores


# -- selection --------------------------------------------------------------

def _lowest(flat_scores: np.ndarray, flat_mask: np.ndarray, k: int) -> np.ndarray:
    """Boolean array marking the ``k`` positions to prune (masked ones first)."""
    s = np.where(flat_mask.astype(bool), flat_scores, -np.inf)
    already = int(np.count_nonzero(flat_mask == 0))
    k = max(k, already)
    order = np.argsort(s, kind="stable")
    out = np.zeros(len(s), dtype=bool)
    out[order[:k]] = True
    return out


def select_global(scores: Mapping[str, np.ndarray], masks: Mapping[str, np.ndarray], fraction: float) -> MaskMap:
    """Prune the globally lowest-scored ``round(fraction * total)`` positions."""
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    names = list(masks)
    sizes = [masks[n].size for n in names]
    total = sum(sizes)
    k = round_half_even(fraction * total)
    if k > total:
        raise InfeasibleCompressionError(f"cannot prune {k} of {total} weights")
    flat_s = np.concatenate([np.asarray(scores[n], dtype=np.float64).ravel() for n in names])
    flat_m = np.concatenate([masks[n].ravel() for n in names])
    pruned = _lowest(flat_s, flat_m, k)
    out, start = {}, 0
    for n, size in zip(names, sizes):
        out[n] = (~pruned[start : start + size]).astype(np.uint8).reshape(masks[n].shape)
        start += size
    return out


def select_layerwise(scores: Mapping[str, np.ndarray], masks: Mapping[str, np.ndarray], fraction: float) -> MaskMap:
    """Within each tensor, prune its lowest-scored ``round(fraction * numel)`` positions."""
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    out = {}
    for n, m in masks.items():
        k = round_half_even(fraction * m.size)
        if k > m.size:
            raise InfeasibleCompressionError(f"{n}: cannot prune {k} of {m.size} weights")
        pruned = _lowest(np.asarray(scores[n], dtype=np.float64).ravel(), m.ravel(), k)
        out[n] = (~pruned).astype(np.uint8).reshape(m.shape)
    return out


def select_random(masks: Mapping[str, np.ndarray], probability: float, rng: np.random.Generator) -> MaskMap:
    """Mask each unmasked position independently with the given probability."""
    if not 0 <= probability <= 1:
        raise ValueError(f"probability must lie in [0, 1], got {probability}")
    out = {}
    for n, m in masks.items():
        draw = rng.random(m.shape) < probability
        out[n] = (m.astype(bool) & ~draw).astype(np.uint8)
    return out


def apply_masks(tensors, masks: Mapping[str, np.ndarray]) -> None:
    """Install new masks, refusing any that would revive a pruned weight."""
    by_name = {p.name: p for p in tensors}
    for n, m in masks.items():
        p = by_name[n]
        if np.any((m == 1) & (p.mask == 0)):
            raise ValueError(f"{n}: mask update would revive pruned weights")
        p.mask = np.ascontiguousarray(m, dtype=np.uint8)


# -- schedule and driver ----------------------------------------------------

def keep_schedule(target_compression: float, iterations: int) -> list[float]:
    """Cumulative fraction of weights remaining after each prune step (geometric)."""
    out = [target_compression ** (-i / iterations) for i in range(1, iterations)]
    return out + [1.0 / target_compression]


def eligible_fraction(remaining: float, total: int, eligible: int) -> float:
    """Fraction of the eligible weights to prune so that the whole model keeps ``remaining``."""
    return (1.0 - remaining) * total / eligible


@dataclass
class IterationStats:
    iteration: int
    target_remaining: float
    achieved_compression: float
    theoretical_speedup: float
    top1_pre_finetune: float
    top5_pre_finetune: float
    top1_post_finetune: float
    top5_post_finetune: float
    epochs_finetuned: int
    stopped_early: bool


@dataclass
class RunRecord:
    """One pruning run: the control metrics, the outcome, and per-iteration history."""

    fingerprint: str
    dataset: str
    arch: str
    strategy: str
    target_compression: float
    achieved_compression: float
    theoretical_speedup: float
    seed: int
    top1_before: float
    top1_after: float
    top5_before: float
    top5_after: float
    epochs_finetuned: int
    iterations: int
    wall_seconds: float
    status: str = "ok"
    failure_cause: Optional[str] = None
    history: list[IterationStats] = field(default_factory=list)
    efficiency: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def prune_and_finetune(
    model: ModelGraph,
    action: PruneAction,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    finetune_cfg: OptimizerCfg,
    lineage: SeedLineage,
    control=None,
) -> RunRecord:
    """Prune ``model`` in place over ``action.iterations`` steps, fine-tuning after each.

    ``control`` is the unpruned model's test accuracy report; it is computed
    here when not supplied.
    """
    started = time.perf_counter()
    control = control or evaluate(model, test)
    tensors = prunable_tensors(model, action.exclude_classifier)
    total = sum(p.numel for p in model.weight_tensors())
    eligible = sum(p.numel for p in tensors)
    score_rng = lineage.rng("score_batch")
    random_rng = lineage.rng("random_prune")
    shuffle_seed = lineage.seed("shuffle")
    opt = make_optimizer(model, finetune_cfg)
    record = RunRecord(
        fingerprint="", dataset=test.name, arch=model.name, strategy=action.strategy,
        target_compression=float(action.target_compression), achieved_compression=1.0,
        theoretical_speedup=1.0, seed=lineage.run_index, top1_before=control.top1, top1_after=control.top1,
        top5_before=control.top5, top5_after=control.top5, epochs_finetuned=0, iterations=action.iterations,
        wall_seconds=0.0,
    )
    prev_eligible_keep = 1.0
    try:
        for i, remaining in enumerate(keep_schedule(action.target_compression, action.iterations), start=1):
            frac = eligible_fraction(remaining, total, eligible)
            if frac > 1:
                raise InfeasibleCompressionError(
                    f"compression {action.target_compression} needs {frac:.3f} of the {eligible} eligible weights pruned"
                )
            masks = current_masks(tensors)
            if action.strategy == "random":
                keep = 1.0 - frac
                prob = 1.0 - keep / prev_eligible_keep if prev_eligible_keep > 0 else 1.0
                prev_eligible_keep = keep
                new = select_random(masks, prob, random_rng)
            else:
                if action.strategy.endswith("gradient"):
                    idx = score_rng.choice(len(train), size=min(action.score_batch_size, len(train)), replace=False)
                    idx.sort()
                    scores = score_gradient_magnitude(model, train.images[idx], train.labels[idx], tensors)
                else:
                    scores = score_magnitude(tensors)
                select = select_global if action.scope == "global" else select_layerwise
                new = select(scores, masks, frac)
            apply_masks(tensors, new)
            opt.reset_masked()
            pre = evaluate(model, test)
            _, tlog = finetune(model, train, val, finetune_cfg, shuffle_seed + i, opt)
            post = evaluate(model, test)
            eff = efficiency_report(model)
            record.history.append(IterationStats(
                iteration=i, target_remaining=remaining,
                achieved_compression=eff.compression_ratio, theoretical_speedup=eff.theoretical_speedup,
                top1_pre_finetune=pre.top1, top5_pre_finetune=pre.top5,
                top1_post_finetune=post.top1, top5_post_finetune=post.top5,
                epochs_finetuned=tlog.epochs, stopped_early=tlog.stopped_early,
            ))
            record.epochs_finetuned += tlog.epochs
            record.achieved_compression = eff.compression_ratio
            record.theoretical_speedup = eff.theoretical_speedup
            record.top1_after, record.top5_after = post.top1, post.top5
            record.efficiency = {**eff.as_dict(), "madds_formula": MADDS_FORMULA}
    except (InfeasibleCompressionError, DivergenceError) as exc:
        record.status = "failed"
        record.failure_cause = f"{type(exc).__name__}: {exc}"
        record.top1_after = record.top5_after = math.nan
    record.wall_seconds = time.perf_counter() - started
    return record
