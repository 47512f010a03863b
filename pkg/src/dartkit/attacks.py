"""L-infinity gradient-sign attacks (FGSM, I-FGSM, PGD)."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

METHODS = ("fgsm", "ifgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "ifgsm"
    epsilon: float = 0.1
    step_size: float = 0.05
    steps: int = 40
    random_start: bool = True
    clamp: str = "feature_bounds"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"attack method must be one of {METHODS}, got {self.method!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.clamp not in ("feature_bounds", "none"):
            raise ValueError(f"clamp must be 'feature_bounds' or 'none', got {self.clamp!r}")
        if self.method == "fgsm":
            object.__setattr__(self, "steps", 1)
            object.__setattr__(self, "step_size", self.epsilon)
            return
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


def project_linf(candidate: np.ndarray, anchor: np.ndarray, eps: float) -> np.ndarray:
    return np.minimum(np.maximum(candidate, anchor - eps), anchor + eps)


def clamp_to_bounds(t: np.ndarray, bounds: np.ndarray | None) -> np.ndarray:
    """Clip columns to ``bounds[:, 0] <= t <= bounds[:, 1]``; ``None`` disables."""
    if bounds is None:
        return t
    return np.minimum(np.maximum(t, bounds[:, 0]), bounds[:, 1])


def attack_bounds(bounds: np.ndarray | None, cfg: AttackConfig) -> np.ndarray | None:
    """Feature bounds widened by epsilon so boundary points keep a full ball."""
    if cfg.clamp == "none" or bounds is None:
        return None
    return np.stack([bounds[:, 0] - cfg.epsilon, bounds[:, 1] + cfg.epsilon], axis=1)


def perturb(model, batch: np.ndarray, labels, cfg: AttackConfig, bounds=None, rng=None) -> np.ndarray:
    """Non-targeted sign-gradient ascent on cross-entropy inside the eps-ball.

    ``labels`` stay fixed across iterations. ``rng`` drives the PGD random
    start; it defaults to a generator seeded with ``cfg.seed``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= model.classes):
        raise ValueError(f"attack labels must lie in [0, {model.classes})")
    if cfg.epsilon == 0:
        return batch.copy()
    box = attack_bounds(bounds, cfg)
    eps = cfg.epsilon
    adv = batch
    if cfg.method == "pgd" and cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        adv = project_linf(clamp_to_bounds(batch + rng.uniform(-eps, eps, size=batch.shape), box), batch, eps)
    for _ in range(cfg.steps):
        grad = model.input_gradient(adv, labels)
        adv = project_linf(clamp_to_bounds(adv + cfg.step_size * np.sign(grad), box), batch, eps)
    return adv
