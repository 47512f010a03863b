"""Desk-scale behaviour on the shared pilot run (see conftest.py) plus one paired Step-1 run."""

from dataclasses import replace

import numpy as np

from dartkit.data import generate
from dartkit.model import build_model
from dartkit.train_uda import train_step1


def task_means(rows, task, method, key, attack="ifgsm"):
    return 100 * np.mean([r[key] for r in rows if r["task"] == task and r["method"] == method and r["attack"] == attack])


def test_domain_alignment_beats_source_only(suite_cfg):
    # plain two-moons shift: the weak invariant coordinates of the suite would hide the alignment benefit
    spec = replace(suite_cfg.tasks["two_moons_rotate"], weak_dims=0, noise_sd=0.1)
    gain = []
    for seed in range(5):
        ds = generate(replace(spec, seed=seed))
        step1 = suite_cfg.for_seed(seed).step1
        accs = []
        for lam in (1.0, 0.0):
            m, _ = train_step1(ds.training_view(), build_model(ds.dim, 2, seed=seed), replace(step1, grl_lambda=lam))
            accs.append(100 * np.mean(m.predict(ds.target_features) == ds.target_labels_eval))
        gain.append(accs[0] - accs[1])
    assert np.mean(gain) >= 3.0


def test_dart_student_vs_teacher_on_moons(pilot):
    rows = pilot[0].rows
    t = "two_moons_rotate"
    assert task_means(rows, t, "dart", "adv_acc") - task_means(rows, t, "none", "adv_acc") >= 20
    assert abs(task_means(rows, t, "dart", "clean_acc") - task_means(rows, t, "none", "clean_acc")) <= 5


def test_attack_defense_below_entangled_term(pilot):
    rows = pilot[0].rows
    t = "two_moons_rotate"
    assert task_means(rows, t, "dart", "attack_defense") < task_means(rows, t, "at", "adv_clean_disagree")


def test_clean_teacher_collapses_under_attack(pilot):
    for task in ("two_moons_rotate", "gaussian_mixture_shift"):
        rows = pilot[0].rows
        assert task_means(rows, task, "none", "adv_acc") < 0.5 * task_means(rows, task, "none", "clean_acc")


def test_pilot_gating_verdicts(pilot):
    report = pilot[0]
    assert report.passed, [v for v in report.verdicts if v["gating"] and not v["passed"]]
