"""Loss, Adam, plateau learning-rate schedule and the mini-batch training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from tumorscope import models
from tumorscope.models import ModelSpec
from tumorscope.tensorcore import NonFiniteError, RngState

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Loss became NaN/inf; carries the epoch and batch where it happened."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def sparse_ce_loss(logits: np.ndarray, labels, class_weights=None) -> tuple[float, np.ndarray]:
    """Weighted mean cross-entropy of integer ``labels`` under softmax(``logits``).

    loss = sum_i w[y_i] * -log p_i[y_i] / sum_i w[y_i]; the returned gradient
    is d loss / d logits, i.e. (p - onehot) * w[y_i] / sum w.
    """
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise ValueError(f"label {labels[bad[0]]} out of range [0, {c}) at record {bad[0]}")
    w = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (c,):
        raise ValueError(f"expected {c} class weights, got {w.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    sw = w[labels]
    total = sw.sum()
    rows = np.arange(b)
    loss = float(-(sw * logp[rows, labels]).sum() / total)
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad *= (sw / total)[:, None]
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Bias-corrected Adam update, applied in place to ``params``.

    Only names present in ``grads`` are touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class PlateauSchedule:
    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 2
    min_lr: float = 1e-6
    min_delta: float = 1e-4
    best: float = math.inf
    wait: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def plateau_update(schedule: PlateauSchedule, metric: float) -> float:
    """Record one epoch's monitored loss and return the (possibly reduced) lr."""
    if not math.isfinite(metric):
        raise ValueError(f"monitored metric must be finite, got {metric}")
    if metric < schedule.best - schedule.min_delta:
        schedule.best = metric
        schedule.wait = 0
    else:
        schedule.wait += 1
        if schedule.wait >= schedule.patience:
            schedule.lr = max(schedule.lr * schedule.factor, schedule.min_lr)
            schedule.wait = 0
    return schedule.lr


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    class_weights: list[float] | None = None
    seed: int = 0
    schedule: PlateauSchedule | None = None
    # which loss the schedule watches: "val_loss" (falls back to "loss" without validation data) or "loss"
    monitor: str = "val_loss"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.monitor not in ("val_loss", "loss"):
            raise ValueError(f"monitor must be 'val_loss' or 'loss', got {self.monitor!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    acc: float
    val_loss: float | None
    val_acc: float | None
    lr: float


def evaluate(model: ModelSpec, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    """Unweighted mean cross-entropy and accuracy in inference mode."""
    probs = models.predict_proba(model, x, batch_size)
    p = np.clip(probs[np.arange(len(y)), y].astype(np.float64), 1e-12, None)
    return float(-np.log(p).mean()), float((probs.argmax(axis=1) == y).mean())


def _l2_terms(model: ModelSpec, grads: dict[str, np.ndarray]) -> float:
    penalty = 0.0
    for i, layer in enumerate(model.layers):
        lam = layer.hyper.get("l2", 0.0) if layer.kind == "conv" else 0.0
        if lam > 0 and layer.trainable:
            w = layer.params["kernel"]
            penalty += lam * float(np.sum(w.astype(np.float64) ** 2))
            key = f"{model.layer_name(i)}.kernel"
            grads[key] = grads[key] + (2 * lam) * w
    return penalty


def train(model: ModelSpec, x: np.ndarray, y: np.ndarray, config: TrainConfig,
          validation: tuple[np.ndarray, np.ndarray] | None = None,
          rng: RngState | None = None) -> tuple[ModelSpec, list[EpochStats]]:
    """Train a copy of ``model`` with Adam; the input model is left untouched.

    Each epoch shuffles with a seeded stream, runs every mini-batch (the last
    partial one included), and, when a schedule is configured, feeds the
    monitored loss to it.
    """
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    if model.class_count is None:
        raise ValueError("cannot train a feature extractor without a classifier head")
    if y.min() < 0 or y.max() >= model.class_count:
        raise ValueError(f"labels must lie in [0, {model.class_count})")
    rng = rng or RngState(config.seed)
    model = model.copy()
    x = np.asarray(x, dtype=np.float32)
    params = {name: arr for name, _, _, arr in model.named_params(trainable_only=True)}
    adam = AdamState(lr=config.lr)
    sched = None
    if config.schedule is not None:
        sched = dataclasses.replace(config.schedule, lr=config.lr, best=math.inf, wait=0)
    stats: list[EpochStats] = []
    n = len(x)
    for epoch in range(config.epochs):
        order = rng.split(0, epoch).generator().permutation(n)
        loss_sum, correct = 0.0, 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = x[idx], y[idx]
            logits, tr = models.forward_logits(model, xb, "train", rng.split(1, epoch, bi), trace=True)
            loss, grad = sparse_ce_loss(logits, yb, config.class_weights)
            grads = models.backward(model, tr, grad)
            total = loss + _l2_terms(model, grads)
            if not math.isfinite(total):
                raise NumericalError(epoch, bi, total)
            models.apply_running_updates(model, tr)
            adam_step(adam, params, grads)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
        val_loss = val_acc = None
        if validation is not None:
            val_loss, val_acc = evaluate(model, np.asarray(validation[0], np.float32), np.asarray(validation[1]))
        es = EpochStats(epoch, loss_sum / n, correct / n, val_loss, val_acc, adam.lr)
        stats.append(es)
        log.info("epoch %d loss %.4f acc %.4f val_loss %s val_acc %s lr %.2e", epoch, es.loss, es.acc,
                 val_loss, val_acc, adam.lr)
        if sched is not None:
            watched = val_loss if config.monitor == "val_loss" and val_loss is not None else es.loss
            adam.lr = plateau_update(sched, watched)
    model.meta.update({"epochs": config.epochs, "final_lr": adam.lr, "seed": config.seed})
    return model, stats
