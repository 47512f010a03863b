"""Dense float64 matrix ops with hand-written reverse-mode gradients.

A "tensor" here is a 2-D ``numpy.ndarray`` of dtype float64. Every function
is pure: inputs are never modified and no state is kept between calls.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Coerce ``values`` to a 2-D float64 array, rejecting NaN/Inf."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_labels(labels: Sequence[int], batch: int, classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != batch:
        raise DimensionError(f"expected {batch} labels, got {y.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        bad = int(y[(y < 0) | (y >= classes)][0])
        raise ValueError(f"label {bad} out of range [0, {classes})")
    return y


def affine_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[1] != weight.shape[0] or bias.shape != (1, weight.shape[1]):
        raise DimensionError(
            f"affine shapes do not conform: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def affine_backward(upstream: np.ndarray, cached_input: np.ndarray, weight: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)`` for ``y = x W + b``."""
    if upstream.shape != (cached_input.shape[0], weight.shape[1]):
        raise DimensionError(
            f"upstream {upstream.shape} does not match input {cached_input.shape} / weight {weight.shape}"
        )
    grad_input = upstream @ weight.T
    grad_weight = cached_input.T @ upstream
    grad_bias = upstream.sum(axis=0, keepdims=True)
    return grad_input, grad_weight, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(upstream: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    # subgradient at exactly zero is 0
    return np.where(cached_input > 0.0, upstream, 0.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] < 2:
        raise DimensionError(f"softmax needs at least 2 columns, got {logits.shape}")
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: Sequence[int]):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    batch, classes = logits.shape
    y = _check_labels(labels, batch, classes)
    logp = log_softmax(logits)
    rows = np.arange(batch)
    loss = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return loss, grad / batch


def kl_divergence(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    temperature: float,
    weights: np.ndarray | None = None,
):
    """Weighted mean of KL(softmax(t/T) || softmax(s/T)) over the batch.

    The teacher side is a constant: only the gradient with respect to the
    student logits is returned. No T**2 rescaling is applied.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if teacher_logits.shape != student_logits.shape:
        raise DimensionError(
            f"teacher logits {teacher_logits.shape} vs student logits {student_logits.shape}"
        )
    batch = teacher_logits.shape[0]
    if weights is None:
        weights = np.ones((batch, 1))
    weights = np.asarray(weights, dtype=np.float64).reshape(batch, 1)
    if np.any(weights < 0) or np.any(weights > 1):
        raise ValueError("KL weights must lie in [0, 1]")

    log_p = log_softmax(teacher_logits / temperature)
    log_q = log_softmax(student_logits / temperature)
    p = np.exp(log_p)
    per_row = (p * (log_p - log_q)).sum(axis=1, keepdims=True)
    # rounding can leave tiny negatives when p == q
    per_row = np.maximum(per_row, 0.0)
    loss = float((weights * per_row).sum() / batch)
    grad = weights * (np.exp(log_q) - p) / (temperature * batch)
    return loss, grad


def mse(a: np.ndarray, b: np.ndarray):
    """Mean squared difference; gradient is taken with respect to ``b``."""
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = b - a
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def normalized_entropy(probs: np.ndarray) -> np.ndarray:
    """Row entropy divided by log(c); 0 log 0 is taken as 0."""
    classes = probs.shape[1]
    if classes < 2:
        raise DimensionError("normalized entropy needs at least 2 classes")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rows must be probability vectors")
    safe = np.where(probs > 0, probs, 1.0)
    ent = -(probs * np.log(safe)).sum(axis=1, keepdims=True) / math.log(classes)
    # a uniform row is maximal by definition; avoid 1 - 2**-52 from rounding
    ent[probs.max(axis=1) == probs.min(axis=1)] = 1.0
    return np.clip(ent, 0.0, 1.0)


def gradient_reversal_forward(x: np.ndarray) -> np.ndarray:
    return x


def gradient_reversal_backward(upstream: np.ndarray, lam: float) -> np.ndarray:
    return -lam * upstream


def sigmoid_bce(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy on raw logits, via stable log-sigmoid."""
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    # -log sigmoid(z) = softplus(-z);  -log(1 - sigmoid(z)) = softplus(z)
    loss = np.logaddexp(0.0, logits) - targets * logits
    grad = (_sigmoid(logits) - targets) / logits.size
    return float(loss.mean()), grad


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
