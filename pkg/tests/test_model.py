import json

import numpy as np
import pytest

from dartkit import tensor as T
from dartkit.checks import numeric_grad, rel_error
from dartkit.model import (
    SGD, CheckpointError, FreezeViolation, LayerSpec, Model, apply_update, build_model,
    clone_into_student, freeze, load_checkpoint, save_checkpoint,
)


def linear_model(w, b, disc_w=None):
    """Single affine classifier on an identity-like encoder (hand-checkable)."""
    d, c = np.asarray(w).shape
    m = Model([LayerSpec("affine", d, d)], [LayerSpec("affine", d, c)], [LayerSpec("affine", d, 1)], c)
    m.params["encoder.0.weight"] = np.eye(d)
    m.params["encoder.0.bias"] = np.zeros((1, d))
    m.params["classifier.0.weight"] = np.asarray(w, float)
    m.params["classifier.0.bias"] = np.asarray(b, float).reshape(1, c)
    if disc_w is not None:
        m.params["discriminator.0.weight"] = np.asarray(disc_w, float).reshape(d, 1)
    return m


def test_architecture_dims():
    m = build_model(5, 3)
    assert (m.input_dim, m.feature_dim, m.classes) == (5, 32, 3)
    c = build_model(5, 3, teacher="cdan")
    assert c.params["discriminator.0.weight"].shape == (32 * 3, 32)


def test_mismatched_dims_rejected():
    with pytest.raises(ValueError):
        Model([LayerSpec("affine", 2, 4)], [LayerSpec("affine", 5, 2)], [LayerSpec("affine", 4, 1)], 2)


def test_zero_final_layer_gives_uniform_probs():
    m = build_model(2, 4, seed=1)
    m.params["classifier.0.weight"][:] = 0
    pred = m.forward(np.random.default_rng(0).normal(size=(6, 2)))
    assert np.allclose(pred.probs, 0.25) and np.all(pred.entropy == 1.0)


def test_linear_model_hand_logits():
    w, b = np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([0.5, -0.5])
    x = np.array([[1.0, 2.0], [-1.0, 0.0]])
    logits = linear_model(w, b).forward(x).logits
    assert np.array_equal(logits, [[1 + 4 + 0.5, -1 + 1 - 0.5], [-1 + 0.5, 1 - 0.5]])


def test_forward_consistency():
    m = build_model(3, 4, seed=2)
    pred = m.forward(np.random.default_rng(1).normal(size=(20, 3)))
    assert np.allclose(pred.probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.array_equal(pred.pseudo_labels, np.argmax(pred.probs, axis=1))


def test_tie_break_lowest_index():
    m = build_model(2, 3, seed=0)
    m.params["classifier.0.weight"][:] = 0
    assert np.all(m.forward(np.ones((2, 2))).pseudo_labels == 0)


def test_forward_dimension_error():
    with pytest.raises(T.DimensionError):
        build_model(3, 2).forward(np.zeros((2, 4)))


def test_domain_logit_unconditional_hand():
    m = linear_model(np.eye(2), np.zeros(2), disc_w=[0.5, -2.0])
    m.params["discriminator.0.bias"] = np.array([[0.25]])
    feats = np.array([[1.0, 1.0], [2.0, 0.0]])
    logit, _ = m.domain_logit(feats)
    assert np.array_equal(logit, [[0.5 - 2 + 0.25], [1.0 + 0.25]])


def test_domain_logit_conditional_outer_product():
    m = Model([LayerSpec("affine", 2, 2)], [LayerSpec("affine", 2, 2)], [LayerSpec("affine", 4, 1)], 2, conditional=True)
    m.params["discriminator.0.weight"] = np.array([[1.0], [10.0], [100.0], [1000.0]])
    f = np.array([[2.0, 3.0]])
    p = np.array([[0.25, 0.75]])
    # flattened outer product [f0 p0, f0 p1, f1 p0, f1 p1]
    outer = [2 * 0.25, 2 * 0.75, 3 * 0.25, 3 * 0.75]
    logit, (d_cache, _, _) = m.domain_logit(f, p)
    assert np.array_equal(d_cache[0], [outer])
    assert logit.item() == pytest.approx(np.dot(outer, [1, 10, 100, 1000]))


def test_conditional_needs_probs():
    m = build_model(2, 2, teacher="cdan")
    with pytest.raises(ValueError, match="probs"):
        m.domain_logit(np.zeros((1, 32)))


def test_grl_zero_blocks_encoder_gradient():
    m = build_model(2, 2, seed=3)
    x = np.random.default_rng(2).normal(size=(4, 2))
    cache = m.forward_cached(x)
    logit, dc = m.domain_logit(cache.prediction.features, grl_lambda=0.0)
    _, g = T.sigmoid_bce(logit, np.ones_like(logit))
    grads = m.zero_grads()
    gf = m.domain_backward(g, dc, grads)
    m.backward(cache, grad_features=gf, grads=grads)
    assert all(np.all(grads[k] == 0) for k in grads if k.startswith("encoder"))
    assert any(np.any(grads[k] != 0) for k in grads if k.startswith("discriminator"))


def test_input_gradient_closed_form_logistic():
    # two-class softmax with logits (0, w.x + b) is logistic regression
    w, b = np.array([0.7, -1.3]), 0.2
    m = linear_model(np.stack([np.zeros(2), w], axis=1), np.array([0.0, b]))
    x = np.array([[0.4, 0.9]])
    for y in (0, 1):
        p = 1 / (1 + np.exp(-(x @ w + b)))
        assert np.allclose(m.input_gradient(x, [y]), (p - y) * w, atol=1e-15)


def test_input_gradient_pure_and_fd():
    m = build_model(3, 3, hidden=(8, 6), seed=4)
    m.freeze()
    x = np.random.default_rng(3).normal(size=(5, 3))
    y = np.array([0, 1, 2, 1, 0])
    g1, g2 = m.input_gradient(x, y), m.input_gradient(x, y)
    assert g1.tobytes() == g2.tobytes()
    fd = numeric_grad(lambda: T.cross_entropy(m.logits(x), y)[0], x)
    assert rel_error(g1, fd) <= 1e-4


def test_sgd_lr_zero_and_plain_step():
    m = build_model(2, 2, seed=5)
    before = {k: v.copy() for k, v in m.params.items()}
    grads = {k: np.ones_like(v) for k, v in m.params.items()}
    apply_update(m, SGD(lr=0.0), grads)
    assert all(np.array_equal(before[k], m.params[k]) for k in before)
    apply_update(m, SGD(lr=1.0, momentum=0.0, weight_decay=0.0), grads)
    assert all(np.array_equal(before[k] - 1.0, m.params[k]) for k in before)


def test_sgd_momentum_hand_recurrence():
    m = linear_model(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))
    key = "classifier.0.weight"
    p0 = m.params[key].copy()
    g1, g2 = np.full((2, 2), 0.5), np.full((2, 2), -0.25)
    opt = SGD(lr=0.1, momentum=0.9, weight_decay=0.01)
    opt.step(m, {key: g1}, keys=[key])
    v1 = g1 + 0.01 * p0
    p1 = p0 - 0.1 * v1
    assert np.allclose(m.params[key], p1, atol=1e-15)
    opt.step(m, {key: g2}, keys=[key])
    v2 = 0.9 * v1 + g2 + 0.01 * p1
    assert np.allclose(m.params[key], p1 - 0.1 * v2, atol=1e-15)


def test_frozen_model_rejects_updates_and_checksum():
    m = build_model(2, 2, seed=6)
    freeze(m)
    digest = m.checksum()
    with pytest.raises(FreezeViolation):
        SGD(lr=0.1).step(m, m.zero_grads())
    assert m.checksum() == digest
    m.params["encoder.0.bias"] = m.params["encoder.0.bias"] + 1
    with pytest.raises(FreezeViolation):
        m.verify_frozen()


def test_clone_is_independent():
    t = build_model(2, 2, seed=7)
    t.freeze()
    digest = t.checksum()
    s = clone_into_student(t)
    x = np.random.default_rng(4).normal(size=(6, 2))
    assert np.array_equal(s.forward(x).logits, t.forward(x).logits)
    assert not s.frozen
    s.params["classifier.0.weight"] += 1.0
    SGD(lr=0.5).step(s, {k: np.ones_like(v) for k, v in s.params.items()})
    assert t.checksum() == digest


def test_checkpoint_round_trip(tmp_path):
    m = build_model(3, 4, teacher="cdan", seed=8)
    m.params["encoder.0.bias"] = np.random.default_rng(5).normal(size=m.params["encoder.0.bias"].shape) * 1e-300
    m.freeze()
    save_checkpoint(m, tmp_path / "m.json", {"seed": 8})
    back = load_checkpoint(tmp_path / "m.json", expected_classes=4)
    assert back.frozen and back.conditional and back.provenance == {"seed": 8}
    for k, v in m.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    assert back.checksum() == m.checksum()


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(build_model(2, 2), tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    (tmp_path / "m.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(tmp_path / "m.json")


def test_checkpoint_class_mismatch(tmp_path):
    save_checkpoint(build_model(2, 2), tmp_path / "m.json")
    with pytest.raises(CheckpointError, match="3"):
        load_checkpoint(tmp_path / "m.json", expected_classes=3)


def test_checkpoint_version_and_shape(tmp_path):
    save_checkpoint(build_model(2, 2), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["format_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(tmp_path / "v.json")
    doc["format_version"] = 1
    doc["params"]["encoder.0.weight"] = [[0.0]]
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "s.json")
