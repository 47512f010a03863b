"""Step 2 robustification by disentangled distillation, and UDA+VAT baselines.

DART touches only target data: its entry points take a :class:`TargetView`.
The +AT and +Trades baselines train a single model jointly on source and
target and take a :class:`TrainingView`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, perturb
from .data import TargetView, TrainingView, minibatches, paired_batches
from .model import SGD, FreezeViolation, Model
from .train_uda import TrainingError, check_finite, uda_terms


@dataclass
class Step2Config:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    temperature: float = 2.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    attack_target: str = "student"
    pseudo_label_policy: str = "once"
    mse_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mse_weight < 0:
            raise ValueError(f"mse_weight must be >= 0, got {self.mse_weight}")
        if self.attack_target not in ("student", "teacher"):
            raise ValueError(f"attack_target must be 'student' or 'teacher', got {self.attack_target!r}")
        if self.pseudo_label_policy not in ("once", "per_epoch"):
            raise ValueError(f"pseudo_label_policy must be 'once' or 'per_epoch', got {self.pseudo_label_policy!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def optimizer(self) -> SGD:
        return SGD(self.lr, self.momentum, self.weight_decay)


@dataclass
class BaselineConfig:
    """Joint UDA + adversarial training settings for +AT / +Trades."""

    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grl_lambda: float = 1.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    trades_beta: float = 1.0
    seed: int = 0

    def optimizer(self) -> SGD:
        return SGD(self.lr, self.momentum, self.weight_decay)


DART_HEADER = ("epoch", "l_adv_kl", "l_clean_mse", "l_clean_kl", "tgt_clean_acc", "tgt_adv_acc")
AT_HEADER = ("epoch", "l_cls_clean", "l_cls_adv", "l_da_clean", "l_da_adv", "tgt_clean_acc", "tgt_adv_acc")
TRADES_HEADER = ("epoch", "l_cls_clean", "l_cls_adv", "l_da_clean", "l_trades_kl", "tgt_clean_acc", "tgt_adv_acc")


def compute_pseudo_labels(teacher: Model, target_features: np.ndarray):
    """Teacher argmax labels and normalized entropies on clean target samples."""
    if not teacher.frozen:
        raise FreezeViolation("pseudo-labels must come from a frozen teacher")
    pred = teacher.forward(target_features)
    return pred.pseudo_labels, pred.entropy


def dart_batch(teacher: Model, student: Model, xb, labels, entropy, cfg: Step2Config, bounds=None, rng=None):
    """Losses and student gradients for one target batch.

    Returns ``(losses, grads)`` with losses keyed ``l_adv_kl``, ``l_clean_mse``,
    ``l_clean_kl``. The teacher is only read.
    """
    attacker = student if cfg.attack_target == "student" else teacher
    x_adv = perturb(attacker, xb, labels, cfg.attack, bounds, rng)
    weights = 1.0 - entropy

    t = teacher.forward(xb)
    s_clean = student.forward_cached(xb)
    s_adv = student.forward_cached(x_adv)

    l_adv, g_adv = T.kl_divergence(t.logits, s_adv.prediction.logits, cfg.temperature, weights)
    l_kl, g_kl = T.kl_divergence(t.logits, s_clean.prediction.logits, cfg.temperature, weights)
    l_mse, g_mse = T.mse(t.features, s_clean.prediction.features)

    grads = student.zero_grads()
    student.backward(s_adv, grad_logits=g_adv, grads=grads)
    g_feat = cfg.mse_weight * g_mse if cfg.mse_weight else None
    student.backward(s_clean, grad_logits=g_kl, grad_features=g_feat, grads=grads)
    losses = {"l_adv_kl": l_adv, "l_clean_mse": l_mse, "l_clean_kl": l_kl}
    return losses, grads


def total_dart_loss(losses: dict, cfg: Step2Config) -> float:
    return losses["l_adv_kl"] + cfg.mse_weight * losses["l_clean_mse"] + losses["l_clean_kl"]


def dart_epoch(
    teacher: Model,
    student: Model,
    view: TargetView,
    cfg: Step2Config,
    opt: SGD,
    epoch: int,
    labels: np.ndarray,
    entropy: np.ndarray,
) -> dict:
    """One pass over the target set; returns the mean loss components."""
    if not isinstance(view, TargetView):
        raise TypeError("DART consumes a TargetView (target features only)")
    if not teacher.frozen:
        raise FreezeViolation("the teacher must be frozen before step 2")
    if teacher.feature_dim != student.feature_dim or not teacher.same_architecture(student):
        raise T.DimensionError("teacher and student architectures differ")
    x = view.target_features
    sums = {"l_adv_kl": 0.0, "l_clean_mse": 0.0, "l_clean_kl": 0.0}
    batches = minibatches(len(x), cfg.batch_size, cfg.seed, epoch)
    for b, idx in enumerate(batches):
        rng = np.random.default_rng([cfg.attack.seed, cfg.seed, epoch, b])
        losses, grads = dart_batch(teacher, student, x[idx], labels[idx], entropy[idx], cfg, view.feature_bounds, rng)
        check_finite(losses.values(), cfg.lr, epoch, b)
        opt.step(student, grads)
        for k, v in losses.items():
            sums[k] += v
    teacher.verify_frozen()
    return {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}


Monitor = Callable[[Model], "tuple[float, float]"]


def _with_monitor(row: dict, model: Model, monitor: Monitor | None) -> dict:
    clean, adv = monitor(model) if monitor else (float("nan"), float("nan"))
    row["tgt_clean_acc"], row["tgt_adv_acc"] = clean, adv
    return row


def train_dart(
    teacher: Model,
    view: TargetView,
    cfg: Step2Config,
    monitor: Monitor | None = None,
    label_override: np.ndarray | None = None,
):
    """Clone the frozen teacher into a student and robustify it.

    ``label_override`` replaces the teacher pseudo-labels used to direct the
    training-time attack (ablation hook; entropy weights still come from the
    teacher). Returns ``(student, trace_rows)``.
    """
    if not teacher.frozen:
        raise FreezeViolation("the teacher must be frozen before step 2")
    student = teacher.clone()
    opt = cfg.optimizer()
    labels, entropy = compute_pseudo_labels(teacher, view.target_features)
    rows = []
    for epoch in range(cfg.epochs):
        if cfg.pseudo_label_policy == "per_epoch":
            labels, entropy = compute_pseudo_labels(teacher, view.target_features)
        attack_labels = labels if label_override is None else np.asarray(label_override)
        row = dart_epoch(teacher, student, view, cfg, opt, epoch, attack_labels, entropy)
        rows.append(_with_monitor(row, student, monitor))
    return student, rows


# -- UDA + VAT baselines ----------------------------------------------------------


def _pair_attacks(model: Model, xs, ys, xt, cfg: BaselineConfig, bounds, epoch: int, b: int):
    rng = np.random.default_rng([cfg.attack.seed, cfg.seed, epoch, b])
    xs_adv = perturb(model, xs, ys, cfg.attack, bounds, rng)
    # no target labels: the current model's own predictions direct the attack
    xt_adv = perturb(model, xt, model.predict(xt), cfg.attack, bounds, rng)
    return xs_adv, xt_adv


def at_baseline_epoch(model: Model, view: TrainingView, cfg: BaselineConfig, opt: SGD, epoch: int) -> dict:
    """Clean and adversarial CE on source, plus clean/clean and adv/adv alignment.

    One shared discriminator handles both alignment pairs.
    """
    xs, ys, xt = view.source_features, view.source_labels, view.target_features
    keys = ("l_cls_clean", "l_cls_adv", "l_da_clean", "l_da_adv")
    sums = dict.fromkeys(keys, 0.0)
    n_batches = 0
    for b, (si, ti) in enumerate(paired_batches(len(xs), len(xt), cfg.batch_size, cfg.seed, epoch)):
        xs_adv, xt_adv = _pair_attacks(model, xs[si], ys[si], xt[ti], cfg, view.feature_bounds, epoch, b)
        grads = model.zero_grads()
        terms = uda_terms(model, xs[si], ys[si], xt[ti], cfg.grl_lambda, grads)
        terms += uda_terms(model, xs_adv, ys[si], xt_adv, cfg.grl_lambda, grads)
        parts = dict(zip(("l_cls_clean", "l_da_clean", "l_cls_adv", "l_da_adv"), terms))
        check_finite(parts.values(), cfg.lr, epoch, b)
        opt.step(model, grads)
        for k in keys:
            sums[k] += parts[k]
        n_batches += 1
    return {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}


def trades_baseline_epoch(model: Model, view: TrainingView, cfg: BaselineConfig, opt: SGD, epoch: int) -> dict:
    """CE on clean and adversarial source, KL(clean target || adv target), clean alignment."""
    xs, ys, xt = view.source_features, view.source_labels, view.target_features
    keys = ("l_cls_clean", "l_cls_adv", "l_da_clean", "l_trades_kl")
    sums = dict.fromkeys(keys, 0.0)
    n_batches = 0
    for b, (si, ti) in enumerate(paired_batches(len(xs), len(xt), cfg.batch_size, cfg.seed, epoch)):
        xs_adv, xt_adv = _pair_attacks(model, xs[si], ys[si], xt[ti], cfg, view.feature_bounds, epoch, b)
        grads = model.zero_grads()
        l_cls, l_da = uda_terms(model, xs[si], ys[si], xt[ti], cfg.grl_lambda, grads)

        c_sadv = model.forward_cached(xs_adv)
        l_cls_adv, g = T.cross_entropy(c_sadv.prediction.logits, ys[si])
        model.backward(c_sadv, grad_logits=g, grads=grads)

        clean_logits = model.logits(xt[ti])
        c_tadv = model.forward_cached(xt_adv)
        l_kl, g = T.kl_divergence(clean_logits, c_tadv.prediction.logits, 1.0)
        model.backward(c_tadv, grad_logits=cfg.trades_beta * g, grads=grads)

        parts = {"l_cls_clean": l_cls, "l_cls_adv": l_cls_adv, "l_da_clean": l_da, "l_trades_kl": l_kl}
        check_finite(parts.values(), cfg.lr, epoch, b)
        opt.step(model, grads)
        for k in keys:
            sums[k] += parts[k]
        n_batches += 1
    return {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}


BASELINES = {"at": at_baseline_epoch, "trades": trades_baseline_epoch}


def train_baseline(method: str, model: Model, view: TrainingView, cfg: BaselineConfig, monitor: Monitor | None = None):
    """Train ``model`` in place with the +AT or +Trades recipe; returns ``(model, rows)``."""
    if method not in BASELINES:
        raise ValueError(f"baseline must be one of {sorted(BASELINES)}, got {method!r}")
    if model.frozen:
        raise TrainingError("baseline training needs an unfrozen model")
    epoch_fn = BASELINES[method]
    opt = cfg.optimizer()
    rows = []
    for epoch in range(cfg.epochs):
        rows.append(_with_monitor(epoch_fn(model, view, cfg, opt, epoch), model, monitor))
    return model, rows
