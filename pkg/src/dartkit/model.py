"""Encoder / classifier / domain-discriminator network built from MLP stacks."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T

FORMAT_VERSION = 1
PARTS = ("encoder", "classifier", "discriminator")


class FreezeViolation(RuntimeError):
    """An update was attempted on a frozen model."""


class CheckpointError(ValueError):
    """A checkpoint file could not be loaded."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0

    def __post_init__(self):
        if self.kind not in ("affine", "relu"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "affine" and (self.in_dim < 1 or self.out_dim < 1):
            raise ValueError("affine layers need positive in_dim and out_dim")


def mlp_specs(dims: Sequence[int], final_relu: bool) -> list[LayerSpec]:
    """Affine layers through ``dims`` with ReLU between them."""
    specs = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        specs.append(LayerSpec("affine", a, b))
        if final_relu or i < len(dims) - 2:
            specs.append(LayerSpec("relu"))
    return specs


def _stack_dims(specs: Sequence[LayerSpec]) -> tuple[int, int]:
    affine = [s for s in specs if s.kind == "affine"]
    for prev, nxt in zip(affine[:-1], affine[1:]):
        if prev.out_dim != nxt.in_dim:
            raise ValueError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
    return affine[0].in_dim, affine[-1].out_dim


@dataclass
class Prediction:
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    entropy: np.ndarray
    pseudo_labels: np.ndarray


@dataclass
class ForwardCache:
    encoder: list
    classifier: list
    prediction: Prediction


class Model:
    """Network ``M = E ∪ C`` plus a domain discriminator ``D``.

    Parameters live in ``self.params`` keyed ``"<part>.<layer>.weight|bias"``.
    Gradients are plain dicts with the same keys.
    """

    def __init__(self, encoder, classifier, discriminator, classes: int, conditional: bool = False):
        self.specs = {
            "encoder": list(encoder),
            "classifier": list(classifier),
            "discriminator": list(discriminator),
        }
        self.classes = int(classes)
        self.conditional = bool(conditional)
        self.frozen = False
        self._frozen_checksum: str | None = None

        self.input_dim, self.feature_dim = _stack_dims(self.specs["encoder"])
        c_in, c_out = _stack_dims(self.specs["classifier"])
        d_in, d_out = _stack_dims(self.specs["discriminator"])
        if c_in != self.feature_dim or c_out != self.classes:
            raise ValueError(f"classifier must map {self.feature_dim} -> {self.classes}, got {c_in} -> {c_out}")
        expect = self.feature_dim * self.classes if conditional else self.feature_dim
        if d_in != expect or d_out != 1:
            raise ValueError(f"discriminator must map {expect} -> 1, got {d_in} -> {d_out}")
        self.params: dict[str, np.ndarray] = {}
        for part in PARTS:
            for i, spec in enumerate(self.specs[part]):
                if spec.kind == "affine":
                    self.params[f"{part}.{i}.weight"] = np.zeros((spec.in_dim, spec.out_dim))
                    self.params[f"{part}.{i}.bias"] = np.zeros((1, spec.out_dim))

    def init_weights(self, seed: int) -> "Model":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        for key in sorted(self.params):
            if key.endswith(".weight"):
                fan_in, fan_out = self.params[key].shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                self.params[key] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            else:
                self.params[key] = np.zeros_like(self.params[key])
        return self

    # -- stacks -----------------------------------------------------------

    def _run(self, part: str, x: np.ndarray):
        cache = []
        for i, spec in enumerate(self.specs[part]):
            cache.append(x)
            if spec.kind == "affine":
                x = T.affine_forward(x, self.params[f"{part}.{i}.weight"], self.params[f"{part}.{i}.bias"])
            else:
                x = T.relu_forward(x)
        return x, cache

    def _back(self, part: str, upstream: np.ndarray, cache, grads: dict | None):
        for i in range(len(self.specs[part]) - 1, -1, -1):
            spec = self.specs[part][i]
            if spec.kind == "affine":
                w = self.params[f"{part}.{i}.weight"]
                upstream, gw, gb = T.affine_backward(upstream, cache[i], w)
                if grads is not None:
                    grads[f"{part}.{i}.weight"] += gw
                    grads[f"{part}.{i}.bias"] += gb
            else:
                upstream = T.relu_backward(upstream, cache[i])
        return upstream

    # -- forward / backward ------------------------------------------------

    def forward_cached(self, batch: np.ndarray) -> ForwardCache:
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise T.DimensionError(f"batch shape {batch.shape} does not match input dim {self.input_dim}")
        feats, enc_cache = self._run("encoder", batch)
        logits, cls_cache = self._run("classifier", feats)
        probs = T.softmax(logits)
        pred = Prediction(
            features=feats,
            logits=logits,
            probs=probs,
            entropy=T.normalized_entropy(probs),
            pseudo_labels=np.argmax(probs, axis=1),
        )
        return ForwardCache(enc_cache, cls_cache, pred)

    def forward(self, batch: np.ndarray) -> Prediction:
        return self.forward_cached(batch).prediction

    def logits(self, batch: np.ndarray) -> np.ndarray:
        feats, _ = self._run("encoder", batch)
        return self._run("classifier", feats)[0]

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(batch), axis=1)

    def backward(self, cache: ForwardCache, grad_logits=None, grad_features=None, grads=None):
        """Backpropagate logit and/or feature gradients; returns grad wrt input."""
        up = np.zeros_like(cache.prediction.features)
        if grad_logits is not None:
            up = up + self._back("classifier", grad_logits, cache.classifier, grads)
        if grad_features is not None:
            up = up + grad_features
        return self._back("encoder", up, cache.encoder, grads)

    def domain_logit(self, features: np.ndarray, probs: np.ndarray | None = None, grl_lambda: float = 1.0):
        """Discriminator logit with a gradient-reversal point at its input.

        Returns ``(logit, cache)``; feed the cache to :meth:`domain_backward`.
        In conditional mode the input is the row-wise flattened outer product
        ``features ⊗ probs``; probs are treated as constants.
        """
        if self.conditional:
            if probs is None:
                raise ValueError("conditional discriminator requires probs")
            d_in = (features[:, :, None] * probs[:, None, :]).reshape(features.shape[0], -1)
        else:
            if features.shape[1] != self.feature_dim:
                raise T.DimensionError(f"features {features.shape} vs feature dim {self.feature_dim}")
            d_in = features
        d_in = T.gradient_reversal_forward(d_in)
        logit, d_cache = self._run("discriminator", d_in)
        return logit, (d_cache, probs, grl_lambda)

    def domain_backward(self, grad_logit: np.ndarray, cache, grads=None) -> np.ndarray:
        """Backprop through D and the reversal; returns the (reversed) feature gradient."""
        d_cache, probs, lam = cache
        g = self._back("discriminator", grad_logit, d_cache, grads)
        g = T.gradient_reversal_backward(g, lam)
        if self.conditional:
            g = (g.reshape(g.shape[0], self.feature_dim, self.classes) * probs[:, None, :]).sum(axis=2)
        return g

    def input_gradient(self, batch: np.ndarray, labels) -> np.ndarray:
        """Gradient of mean cross-entropy with respect to the input batch."""
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise T.DimensionError(f"batch shape {batch.shape} does not match input dim {self.input_dim}")
        feats, enc_cache = self._run("encoder", batch)
        logits, cls_cache = self._run("classifier", feats)
        _, g_logits = T.cross_entropy(logits, labels)
        g_feats = self._back("classifier", g_logits, cls_cache, None)
        return self._back("encoder", g_feats, enc_cache, None)

    # -- parameter bookkeeping ------------------------------------------------

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key]).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        self.frozen = True
        self._frozen_checksum = self.checksum()

    def verify_frozen(self) -> None:
        if not self.frozen or self.checksum() != self._frozen_checksum:
            raise FreezeViolation("teacher parameters changed after freezing")

    def clone(self) -> "Model":
        other = copy.deepcopy(self)
        other.frozen = False
        other._frozen_checksum = None
        return other

    def same_architecture(self, other: "Model") -> bool:
        return self.specs == other.specs and self.classes == other.classes and self.conditional == other.conditional


def build_model(
    input_dim: int,
    classes: int,
    hidden: Sequence[int] = (64, 32),
    disc_hidden: int = 32,
    teacher: str = "dann",
    seed: int = 0,
) -> Model:
    if teacher not in ("dann", "cdan"):
        raise ValueError(f"teacher variant must be 'dann' or 'cdan', got {teacher!r}")
    conditional = teacher == "cdan"
    encoder = mlp_specs([input_dim, *hidden], final_relu=True)
    classifier = mlp_specs([hidden[-1], classes], final_relu=False)
    d_in = hidden[-1] * classes if conditional else hidden[-1]
    discriminator = mlp_specs([d_in, disc_hidden, 1], final_relu=False)
    return Model(encoder, classifier, discriminator, classes, conditional).init_weights(seed)


def clone_into_student(teacher: Model) -> Model:
    return teacher.clone()


def freeze(model: Model) -> None:
    model.freeze()


@dataclass
class SGD:
    """SGD with momentum and L2 weight decay (PyTorch update convention)."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("need lr >= 0, momentum in [0, 1), weight_decay >= 0")

    def step(self, model: Model, grads: dict[str, np.ndarray], keys=None) -> None:
        if model.frozen:
            raise FreezeViolation("refusing to update a frozen model")
        for key in keys if keys is not None else grads:
            p = model.params[key]
            g = grads[key] + self.weight_decay * p
            v = self.velocity.get(key)
            v = g if v is None or self.momentum == 0 else self.momentum * v + g
            self.velocity[key] = v
            model.params[key] = p - self.lr * v


def apply_update(model: Model, optimizer: SGD, grads: dict[str, np.ndarray]) -> None:
    optimizer.step(model, grads)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: Model, path, provenance: dict | None = None) -> None:
    """Write a JSON text checkpoint; floats use shortest round-trip repr."""
    doc = {
        "format_version": FORMAT_VERSION,
        "class_count": model.classes,
        "conditional": model.conditional,
        "frozen": model.frozen,
        "layers": {
            part: [[s.kind, s.in_dim, s.out_dim] for s in model.specs[part]] for part in PARTS
        },
        "params": {k: v.tolist() for k, v in sorted(model.params.items())},
        "provenance": provenance or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)


def load_checkpoint(path, expected_classes: int | None = None) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: checkpoint root must be an object")
    for key in ("format_version", "class_count", "layers", "params"):
        if key not in doc:
            raise CheckpointError(f"{path}: missing field {key!r}")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {doc['format_version']} != {FORMAT_VERSION}")
    if expected_classes is not None and doc["class_count"] != expected_classes:
        raise CheckpointError(
            f"{path}: checkpoint has {doc['class_count']} classes, configuration expects {expected_classes}"
        )
    try:
        specs = {part: [LayerSpec(*row) for row in doc["layers"][part]] for part in PARTS}
        model = Model(
            specs["encoder"], specs["classifier"], specs["discriminator"],
            doc["class_count"], doc.get("conditional", False),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad architecture block ({exc})") from None
    stored = doc["params"]
    if set(stored) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    for key, blank in model.params.items():
        arr = np.asarray(stored[key], dtype=np.float64)
        if arr.shape != blank.shape:
            raise CheckpointError(f"{path}: parameter {key} has shape {arr.shape}, expected {blank.shape}")
        model.params[key] = arr
    model.provenance = doc.get("provenance", {})
    if doc.get("frozen"):
        model.freeze()
    return model
