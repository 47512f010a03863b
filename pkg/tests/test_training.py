import math

import numpy as np
import pytest

from dartkit import tensor as T
from dartkit.attacks import AttackConfig
from dartkit.data import DomainDataset, ShiftSpec, generate
from dartkit.model import FreezeViolation, build_model
from dartkit.train_robust import (
    BaselineConfig, Step2Config, compute_pseudo_labels, dart_batch, dart_epoch, train_baseline, train_dart,
)
from dartkit.train_uda import Step1Config, TrainingError, check_finite, domain_loss, train_step1

SMALL = ShiftSpec(noise_sd=0.15, m=120, n=120, seed=3)


@pytest.fixture(scope="module")
def small():
    ds = generate(SMALL)
    teacher, trace = train_step1(ds.training_view(), build_model(2, 2, hidden=(16, 8), seed=3),
                                 Step1Config(epochs=5, seed=3))
    return ds, teacher, trace


# -- step 1 ---------------------------------------------------------------------


def test_source_only_on_separable_gaussians():
    r = np.random.default_rng(0)
    ys = np.arange(200) % 2
    xs = np.where(ys[:, None] == 0, -2.0, 2.0) + 0.5 * r.normal(size=(200, 2))
    xt = r.normal(size=(50, 2))
    ds = DomainDataset(xs, ys, xt, None, 2)
    model, trace = train_step1(ds.training_view(), build_model(2, 2, seed=0), Step1Config(epochs=50, grl_lambda=0.0))
    assert trace.rows[-1]["src_acc"] >= 0.95
    assert model.frozen


def test_lr_zero_leaves_parameters(small):
    ds = small[0]
    model = build_model(2, 2, hidden=(16, 8), seed=1)
    before = model.checksum()
    _, trace = train_step1(ds.training_view(), model, Step1Config(epochs=1, batch_size=1000, lr=0.0))
    assert model.checksum() == before
    assert all(math.isfinite(trace.rows[0][k]) for k in ("l_cls", "l_da", "src_acc"))


def test_trace_columns_and_eval_only_monitor(small):
    _, _, trace = small
    assert trace.header == ("epoch", "l_cls", "l_da", "src_acc", "tgt_acc")
    assert all(set(r) == set(trace.header) for r in trace.rows)
    assert all(math.isnan(r["tgt_acc"]) for r in trace.rows)


def test_step1_dimension_mismatch(small):
    with pytest.raises(T.DimensionError):
        train_step1(small[0].training_view(), build_model(3, 2), Step1Config(epochs=1))


def test_non_finite_loss_diagnostic():
    with pytest.raises(TrainingError, match=r"batch 7.*lr=0.5"):
        check_finite([1.0, float("nan")], 0.5, 2, 7)


def test_domain_loss_ln2_at_zero_logit():
    m = build_model(2, 2, seed=2)
    for k in ("discriminator.2.weight", "discriminator.2.bias"):
        m.params[k][:] = 0
    f = np.random.default_rng(1).normal(size=(5, 32))
    loss, _, _ = domain_loss(f[:3], f[3:], None, None, m, 1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_domain_loss_reversal_is_negated_plain_gradient():
    m = build_model(2, 2, seed=2)
    f = np.random.default_rng(2).normal(size=(6, 32))
    _, gs_rev, gt_rev = domain_loss(f[:3], f[3:], None, None, m, 0.7)
    _, gs, gt = domain_loss(f[:3], f[3:], None, None, m, -1.0)  # -1 undoes the reversal
    assert np.allclose(gs_rev, -0.7 * gs, rtol=1e-14, atol=0) and np.allclose(gt_rev, -0.7 * gt, rtol=1e-14, atol=0)


def test_cdan_teacher_trains():
    ds = generate(SMALL)
    m, trace = train_step1(ds.training_view(), build_model(2, 2, hidden=(16, 8), teacher="cdan", seed=4),
                           Step1Config(epochs=3, teacher="cdan"))
    assert m.frozen and all(math.isfinite(r["l_da"]) for r in trace.rows)


# -- step 2 --------------------------------------------------------------------


def test_pseudo_labels_uniform_and_confident():
    m = build_model(2, 3, seed=5)
    m.freeze()
    x = np.random.default_rng(3).normal(size=(8, 2))
    labels, h = compute_pseudo_labels(m, x)
    assert np.array_equal(labels, np.argmax(m.logits(x), axis=1))
    flat = m.clone()
    flat.params["classifier.0.weight"][:] = 0
    flat.params["classifier.0.bias"][:] = 0
    flat.freeze()
    assert np.all(compute_pseudo_labels(flat, x)[1] == 1.0)
    sharp = m.clone()
    sharp.params["classifier.0.weight"][:] = 0
    sharp.params["classifier.0.bias"][:] = [[1000.0, 0.0, 0.0]]
    sharp.freeze()
    assert np.all(1.0 - compute_pseudo_labels(sharp, x)[1] == 1.0)


def test_pseudo_labels_need_frozen_teacher():
    with pytest.raises(FreezeViolation):
        compute_pseudo_labels(build_model(2, 2), np.zeros((1, 2)))


def test_clone_eps0_fixed_point(small):
    ds, teacher, _ = small
    student = teacher.clone()
    x = ds.target_features[:64]
    labels, h = compute_pseudo_labels(teacher, x)
    losses, grads = dart_batch(teacher, student, x, labels, h, Step2Config(attack=AttackConfig("ifgsm", 0.0)))
    assert losses == {"l_adv_kl": 0.0, "l_clean_mse": 0.0, "l_clean_kl": 0.0}
    assert all(np.all(g == 0) for g in grads.values())


def test_mse_weight_zero_drops_feature_term(small):
    ds, teacher, _ = small
    student = teacher.clone()
    for k in student.params:
        student.params[k] = student.params[k] + 0.05
    x = ds.target_features[:32]
    labels, h = compute_pseudo_labels(teacher, x)
    cfg0 = Step2Config(attack=AttackConfig("ifgsm", 0.0), mse_weight=0.0)
    _, g0 = dart_batch(teacher, student, x, labels, h, cfg0)
    # KL-only gradients by hand
    t = teacher.forward(x)
    expect = student.zero_grads()
    for _ in range(2):
        c = student.forward_cached(x)
        _, g = T.kl_divergence(t.logits, c.prediction.logits, cfg0.temperature, 1 - h)
        student.backward(c, grad_logits=g, grads=expect)
    assert all(np.allclose(g0[k], expect[k], rtol=1e-12, atol=1e-15) for k in g0)
    _, g1 = dart_batch(teacher, student, x, labels, h, Step2Config(attack=AttackConfig("ifgsm", 0.0), mse_weight=1.0))
    assert any(not np.allclose(g0[k], g1[k]) for k in g0 if k.startswith("encoder"))


def test_dart_contract_errors(small):
    ds, teacher, _ = small
    cfg = Step2Config(epochs=1)
    labels, h = compute_pseudo_labels(teacher, ds.target_features)
    with pytest.raises(TypeError):
        dart_epoch(teacher, teacher.clone(), ds.training_view(), cfg, cfg.optimizer(), 0, labels, h)
    with pytest.raises(FreezeViolation):
        train_dart(build_model(2, 2), ds.target_view(), cfg)
    other = build_model(2, 2, hidden=(16, 4))
    with pytest.raises(T.DimensionError):
        dart_epoch(teacher, other, ds.target_view(), cfg, cfg.optimizer(), 0, labels, h)


def test_dart_run_keeps_teacher_and_traces(small):
    ds, teacher, _ = small
    digest = teacher.checksum()
    cfg = Step2Config(epochs=2, attack=AttackConfig("ifgsm", 0.1, 0.05, 5))
    student, rows = train_dart(teacher, ds.target_view(), cfg)
    assert teacher.checksum() == digest
    assert student.checksum() != digest
    assert list(rows[0]) == ["epoch", "l_adv_kl", "l_clean_mse", "l_clean_kl", "tgt_clean_acc", "tgt_adv_acc"]
    again, _ = train_dart(teacher, ds.target_view(), cfg)
    assert again.checksum() == student.checksum()


def test_per_epoch_policy_matches_once_for_frozen_teacher(small):
    ds, teacher, _ = small
    cfg = Step2Config(epochs=2, attack=AttackConfig("ifgsm", 0.1, 0.05, 3))
    a, _ = train_dart(teacher, ds.target_view(), cfg)
    b, _ = train_dart(teacher, ds.target_view(), Step2Config(epochs=2, attack=cfg.attack, pseudo_label_policy="per_epoch"))
    assert a.checksum() == b.checksum()


# -- baselines --------------------------------------------------------------------


def test_at_eps0_doubles_step1_terms(small):
    ds = small[0]
    cfg = BaselineConfig(epochs=2, attack=AttackConfig("ifgsm", 0.0))
    _, rows = train_baseline("at", build_model(2, 2, hidden=(16, 8), seed=6), ds.training_view(), cfg)
    for r in rows:
        assert set(r) >= {"l_cls_clean", "l_cls_adv", "l_da_clean", "l_da_adv"}
        assert r["l_cls_clean"] == r["l_cls_adv"] and r["l_da_clean"] == r["l_da_adv"]
        assert all(math.isfinite(r[k]) for k in ("l_cls_clean", "l_cls_adv", "l_da_clean", "l_da_adv"))


def test_trades_kl_zero_at_eps0_and_nonnegative(small):
    ds = small[0]
    _, rows = train_baseline("trades", build_model(2, 2, hidden=(16, 8), seed=7), ds.training_view(),
                             BaselineConfig(epochs=2, attack=AttackConfig("ifgsm", 0.0)))
    assert all(r["l_trades_kl"] == 0.0 for r in rows)
    _, rows = train_baseline("trades", build_model(2, 2, hidden=(16, 8), seed=7), ds.training_view(),
                             BaselineConfig(epochs=2, attack=AttackConfig("ifgsm", 0.1, 0.05, 3)))
    assert all(r["l_trades_kl"] >= 0.0 for r in rows)


def test_unknown_baseline():
    with pytest.raises(ValueError):
        train_baseline("mixup", build_model(2, 2), generate(SMALL).training_view(), BaselineConfig())
