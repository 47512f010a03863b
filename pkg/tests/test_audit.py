import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dartkit.attacks import AttackConfig
from dartkit.audit import audit_prop1, audit_thm1, disagreement, evaluate, prop1_terms, thm1_terms
from dartkit.data import ShiftSpec, generate
from dartkit.model import build_model


def test_prop1_three_sample_hand_case():
    truth, clean, adv = [0, 1, 1], [0, 1, 0], [1, 1, 0]
    r = prop1_terms(clean, adv, truth)
    # adv wrong on 0 and 2, clean wrong on 2, adv vs clean differ on 0
    assert (r["err_adv"], r["err_clean"], r["adv_clean_disagree"]) == (2 / 3, 1 / 3, 1 / 3)
    assert r["lhs"] == pytest.approx(1.0) and r["rhs"] == pytest.approx(1.0) and r["holds"]


def test_thm1_four_sample_hand_case():
    truth, clean, adv, star = [0, 1, 2, 0], [0, 1, 1, 0], [1, 1, 1, 2], [0, 1, 2, 2]
    r = thm1_terms(clean, adv, star, truth)
    assert (r["err_adv"], r["err_clean"]) == (0.75, 0.25)
    assert (r["attack_defense"], r["benign_maintenance"], r["err_star"]) == (0.5, 0.5, 0.25)
    assert r["ideal_classifier"] == 0.5
    assert r["lhs"] == 1.0 and r["mid"] == 1.0 and r["rhs"] == 1.5 and r["holds"]


def test_star_equal_to_h_at_eps0_is_tight():
    truth = np.array([0, 1, 1, 0, 2])
    pred = np.array([0, 1, 0, 0, 1])
    r = thm1_terms(pred, pred, pred, truth)
    assert r["attack_defense"] == 0 and r["benign_maintenance"] == 0
    assert r["gap"] == 0.0
    p = prop1_terms(pred, pred, truth)
    assert p["adv_clean_disagree"] == 0 and p["gap"] == 0.0


def test_constant_model_on_balanced_classes():
    truth = np.repeat(np.arange(4), 25)
    assert disagreement(np.zeros(100, int), truth) == 0.75
    with pytest.raises(ValueError):
        disagreement([0, 1], [0])


def test_model_audits_at_eps0():
    ds = generate(ShiftSpec(noise_sd=0.2, m=80, n=80, seed=1))
    h = build_model(2, 2, seed=1)
    cfg = AttackConfig("ifgsm", 0.0)
    p = audit_prop1(h, ds, cfg)
    assert p["err_adv"] == p["err_clean"] and p["adv_clean_disagree"] == 0 and p["holds"]
    t = audit_thm1(h, h, ds, cfg)
    assert t["gap"] == 0.0 and t["holds"]
    rep = evaluate(h, ds, [cfg, AttackConfig("pgd", 0.1, 0.05, 5)])
    assert rep.adv_acc["ifgsm@0"] == rep.clean_acc
    assert rep.adv_acc["pgd@0.1"] <= rep.clean_acc + 1e-12


@given(st.data())
def test_inequalities_hold_for_any_labelings(data):
    n = data.draw(st.integers(1, 40))
    draw = lambda: np.array(data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n)))
    truth, clean, adv, star = draw(), draw(), draw(), draw()
    p = prop1_terms(clean, adv, truth)
    t = thm1_terms(clean, adv, star, truth)
    assert p["holds"] and p["gap"] >= -1e-12
    assert t["holds"] and t["adv_step_holds"] and t["clean_step_holds"]
    assert t["lhs"] <= t["mid"] + 1e-12 <= t["rhs"] + 2e-12
