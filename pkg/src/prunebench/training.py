"""Initialization, optimizers and the train / fine-tune loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .data import BatchStream, Dataset
from .metrics import AccuracyReport, accuracy_report
from .models import ModelGraph
from .tensor import NonFiniteError, Tensor, softmax_cross_entropy

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, last_good_epoch: int):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class OptimizerCfg(BaseModel):
    """Optimizer and loop settings.  Defaults are the fixed-LR Adam recipe."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["adam", "sgd_nesterov"] = "adam"
    lr: float = Field(3e-4, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    batch_size: int = Field(64, gt=0)
    max_epochs: int = Field(30, gt=0)
    early_stop_patience: int = Field(5, ge=1)
    schedule: Literal["fixed"] = "fixed"

    @classmethod
    def imagenet_recipe(cls, **kw) -> "OptimizerCfg":
        return cls(kind="sgd_nesterov", lr=1e-3, momentum=0.9, batch_size=256, max_epochs=20, **kw)


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_accuracy(self) -> float:
        return self.val_accuracy[self.best_epoch - 1] if self.best_epoch else float("nan")


class Optimizer:
    """Mask-respecting first-order optimizer over a model's parameters."""

    def __init__(self, model: ModelGraph, cfg: OptimizerCfg):
        self.cfg = cfg
        self.params = model.param_tensors()
        self.state = [dict() for _ in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            m = p.mask.astype(p.weights.dtype, copy=False)
            g = p.grad * m
            update = self._update(g, st, p.weights.dtype)
            p.weights.data -= update * m

    def _update(self, g, st, dtype):
        raise NotImplementedError

    def reset_masked(self) -> None:
        """Zero optimizer state at currently masked positions."""
        for p, st in zip(self.params, self.state):
            for buf in st.values():
                buf *= p.mask.astype(buf.dtype, copy=False)


class Adam(Optimizer):
    def _update(self, g, st, dtype):
        c = self.cfg
        if not st:
            st["m"] = np.zeros_like(g)
            st["v"] = np.zeros_like(g)
        st["m"] *= dtype.type(c.beta1)
        st["m"] += dtype.type(1 - c.beta1) * g
        st["v"] *= dtype.type(c.beta2)
        st["v"] += dtype.type(1 - c.beta2) * (g * g)
        m_hat = st["m"] / dtype.type(1 - c.beta1**self.t)
        v_hat = st["v"] / dtype.type(1 - c.beta2**self.t)
        return dtype.type(c.lr) * m_hat / (np.sqrt(v_hat) + dtype.type(c.eps))


class SGDNesterov(Optimizer):
    # buf = mu*buf + g ; w -= lr * (g + mu*buf)
    def _update(self, g, st, dtype):
        c = self.cfg
        if not st:
            st["buf"] = np.zeros_like(g)
        st["buf"] *= dtype.type(c.momentum)
        st["buf"] += g
        return dtype.type(c.lr) * (g + dtype.type(c.momentum) * st["buf"])


def make_optimizer(model: ModelGraph, cfg: OptimizerCfg) -> Optimizer:
    return {"adam": Adam, "sgd_nesterov": SGDNesterov}[cfg.kind](model, cfg)


def init_weights(model: ModelGraph, rng: np.random.Generator) -> ModelGraph:
    """Glorot-uniform weights, zero biases."""
    for layer in model.layers:
        if layer.kind == "dense":
            fan_in, fan_out = layer.in_features, layer.out_features
        elif layer.kind == "conv2d":
            rf = layer.kh * layer.kw
            fan_in, fan_out = layer.cin * rf, layer.cout * rf
        else:
            continue
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = layer.weight.weights
        w.data = rng.uniform(-a, a, size=w.shape).astype(model.dtype)
        layer.bias.weights.data = np.zeros(layer.bias.shape, dtype=model.dtype)
    return model


def evaluate(model: ModelGraph, data: Dataset, batch_size: int = 1000) -> AccuracyReport:
    return accuracy_report(model.predict(data.images, batch_size), data.labels)


def _snapshot(model: ModelGraph) -> list[np.ndarray]:
    return [p.weights.data.copy() for p in model.param_tensors()]


def _restore(model: ModelGraph, snap: list[np.ndarray]) -> None:
    for p, d in zip(model.param_tensors(), snap):
        p.weights.data = d


def train_epoch(model: ModelGraph, stream: BatchStream, opt: Optimizer) -> float:
    total, count = 0.0, 0
    for xb, yb in stream.epoch_batches():
        model.zero_grad()
        logits = model.forward(Tensor(xb, dtype=model.dtype))
        loss = softmax_cross_entropy(logits, yb)
        loss.check_finite("loss")
        model.backward(loss)
        opt.step()
        total += loss.item() * len(yb)
        count += len(yb)
    return total / count


def fit(model: ModelGraph, train: Dataset, val: Dataset, cfg: OptimizerCfg, shuffle_seed: int, optimizer: Optional[Optimizer] = None) -> tuple[ModelGraph, TrainLog]:
    """Train with early stopping on validation accuracy; keep the best epoch's weights.

    Stops after ``early_stop_patience`` consecutive epochs that fail to beat
    the best validation accuracy so far.
    """
    opt = optimizer or make_optimizer(model, cfg)
    stream = BatchStream(train, cfg.batch_size, shuffle_seed)
    tlog = TrainLog()
    best, best_snap, stale = -1.0, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        try:
            loss = train_epoch(model, stream, opt)
        except NonFiniteError as exc:
            if best_snap is not None:
                _restore(model, best_snap)
            raise DivergenceError(f"epoch {epoch}: {exc}", last_good_epoch=tlog.best_epoch) from None
        acc = evaluate(model, val).top1
        tlog.train_loss.append(loss)
        tlog.val_accuracy.append(acc)
        log.debug("epoch %d loss %.4f val %.4f", epoch, loss, acc)
        if acc > best:
            best, best_snap, stale = acc, _snapshot(model), 0
            tlog.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                tlog.stopped_early = True
                break
    _restore(model, best_snap)
    return model, tlog


def train_to_convergence(model: ModelGraph, train: Dataset, val: Dataset, cfg: OptimizerCfg, shuffle_seed: int) -> tuple[ModelGraph, TrainLog]:
    return fit(model, train, val, cfg, shuffle_seed)


def finetune(model: ModelGraph, train: Dataset, val: Dataset, cfg: OptimizerCfg, shuffle_seed: int, optimizer: Optional[Optimizer] = None) -> tuple[ModelGraph, TrainLog]:
    """Continue training the masked network; pruned weights stay put."""
    return fit(model, train, val, cfg, shuffle_seed, optimizer)
