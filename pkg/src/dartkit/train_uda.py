"""Step 1: domain-adversarial pre-training of the teacher."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import TrainingView, paired_batches
from .model import SGD, Model, save_checkpoint


class TrainingError(RuntimeError):
    pass


@dataclass
class Step1Config:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grl_lambda: float = 1.0
    grl_schedule: str = "constant"
    teacher: str = "dann"
    seed: int = 0
    checkpoint: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.grl_schedule not in ("constant", "warmup"):
            raise ValueError(f"grl_schedule must be 'constant' or 'warmup', got {self.grl_schedule!r}")

    def optimizer(self) -> SGD:
        return SGD(self.lr, self.momentum, self.weight_decay)

    def lambda_at(self, progress: float) -> float:
        if self.grl_schedule == "constant":
            return self.grl_lambda
        # the usual 2/(1+exp(-10p)) - 1 ramp from 0 to grl_lambda
        return self.grl_lambda * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


@dataclass
class Step1Trace:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    header = ("epoch", "l_cls", "l_da", "src_acc", "tgt_acc")


def domain_loss(source_features, target_features, source_probs, target_probs, model: Model, grl_lambda: float, grads=None):
    """Domain-classification BCE (source = 1, target = 0) through the GRL.

    Returns ``(loss, grad_source_features, grad_target_features)``; the
    feature gradients are already reversed and scaled by ``grl_lambda``.
    Discriminator gradients accumulate into ``grads`` when given.
    """
    feats = np.vstack([source_features, target_features])
    probs = None if source_probs is None else np.vstack([source_probs, target_probs])
    labels = np.concatenate([np.ones(len(source_features)), np.zeros(len(target_features))])[:, None]
    logit, cache = model.domain_logit(feats, probs, grl_lambda)
    loss, g_logit = T.sigmoid_bce(logit, labels)
    g_feats = model.domain_backward(g_logit, cache, grads)
    ns = len(source_features)
    return loss, g_feats[:ns], g_feats[ns:]


def uda_terms(model: Model, xs, ys, xt, grl_lambda: float, grads) -> tuple[float, float]:
    """Accumulate gradients of CE(source) + domain loss; returns ``(l_cls, l_da)``."""
    cs, ct = model.forward_cached(xs), model.forward_cached(xt)
    l_cls, g_logits = T.cross_entropy(cs.prediction.logits, ys)
    ps = pt = None
    if model.conditional:
        ps, pt = cs.prediction.probs, ct.prediction.probs
    l_da, g_fs, g_ft = domain_loss(cs.prediction.features, ct.prediction.features, ps, pt, model, grl_lambda, grads)
    model.backward(cs, grad_logits=g_logits, grad_features=g_fs, grads=grads)
    model.backward(ct, grad_features=g_ft, grads=grads)
    return l_cls, l_da


def check_finite(losses, lr: float, epoch: int, batch: int) -> None:
    if not all(math.isfinite(v) for v in losses):
        raise TrainingError(f"non-finite loss {losses} at epoch {epoch}, batch {batch} (lr={lr})")


def accuracy(model: Model, x, y) -> float:
    return float(np.mean(model.predict(x) == np.asarray(y)))


def train_step1(
    view: TrainingView,
    model: Model,
    cfg: Step1Config,
    monitor: Callable[[Model], float] | None = None,
    provenance: dict | None = None,
) -> tuple[Model, Step1Trace]:
    """Pre-train ``model`` in place on source labels plus domain alignment, then freeze it.

    ``monitor`` (optional) is called once per epoch and its value is logged as
    ``tgt_acc``; it is the only way target ground truth can reach the trace.
    """
    if model.frozen:
        raise TrainingError("step 1 needs an unfrozen model")
    if view.source_features.shape[1] != model.input_dim or view.classes != model.classes:
        raise T.DimensionError(
            f"model expects {model.input_dim} features / {model.classes} classes, "
            f"data has {view.source_features.shape[1]} / {view.classes}"
        )
    opt = cfg.optimizer()
    trace = Step1Trace()
    xs, ys, xt = view.source_features, view.source_labels, view.target_features
    m, n = len(xs), len(xt)
    n_batches = math.ceil(max(m, n) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        l_cls_sum = l_da_sum = 0.0
        for b, (si, ti) in enumerate(paired_batches(m, n, cfg.batch_size, cfg.seed, epoch)):
            lam = cfg.lambda_at((epoch * n_batches + b) / (cfg.epochs * n_batches))
            grads = model.zero_grads()
            l_cls, l_da = uda_terms(model, xs[si], ys[si], xt[ti], lam, grads)
            check_finite((l_cls, l_da), cfg.lr, epoch, b)
            opt.step(model, grads)
            l_cls_sum += l_cls
            l_da_sum += l_da
        trace.append(
            epoch=epoch,
            l_cls=l_cls_sum / n_batches,
            l_da=l_da_sum / n_batches,
            src_acc=accuracy(model, xs, ys),
            tgt_acc=monitor(model) if monitor else float("nan"),
        )
    model.freeze()
    if cfg.checkpoint:
        prov = {"seed": cfg.seed, "step": cfg.epochs * n_batches, "stage": "pretrain"}
        prov.update(provenance or {})
        save_checkpoint(model, cfg.checkpoint, prov)
    return model, trace
