"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the summary.

The pilot-based criteria (4-8) share one desk-suite run from ``configs/desk_suite.ini``;
criterion 7 repeats it, criterion 8 adds the ground-truth-label ablation.
"""

import time
from dataclasses import replace

import numpy as np

from dartkit.checks import attack_soundness, fixed_point, gradient_errors
from dartkit.pilot import ABLATION, METHODS, run_pilot, write_pilot
from dartkit.pipeline import dataset_for, fresh_model
from dartkit.train_robust import compute_pseudo_labels, dart_batch, total_dart_loss, train_dart
from dartkit.train_uda import train_step1

TASKS = ("two_moons_rotate", "gaussian_mixture_shift")


def means(rows, task, method, attack):
    sel = [r for r in rows if r["task"] == task and r["method"] == method and r["attack"] == attack]
    assert len(sel) == 5, f"expected 5 seeds for {task}/{method}/{attack}, got {len(sel)}"
    return 100 * np.mean([r["clean_acc"] for r in sel]), 100 * np.mean([r["adv_acc"] for r in sel])


def test_1_gradient_check(recorder):
    start = time.perf_counter()
    errs = gradient_errors(instances=20, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-4 and elapsed < 30
    recorder(1, "finite-difference gradients", ok,
             f"{len(errs)} ops x 20 instances, max rel err {errs[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert ok


def test_2_attack_soundness(recorder):
    start = time.perf_counter()
    res = attack_soundness(total=10_000, seed=0)
    elapsed = time.perf_counter() - start
    ok = res["generated"] >= 10_000 and res["violations"] == 0 and res["eps0_identity"] and elapsed < 60
    recorder(2, "attack ball and clamp soundness", ok,
             f"{res['generated']} adversarials, {res['violations']} violations, max excess {res['max_excess']:.1e}, "
             f"eps=0 identity {res['eps0_identity']}, {elapsed:.1f}s")
    assert ok


def test_3_teacher_frozen_and_fixed_point(suite_cfg, recorder):
    seed = suite_cfg.seeds[0]
    spec = suite_cfg.tasks["two_moons_rotate"]
    task_cfg = replace(suite_cfg, dataset=replace(spec, seed=seed))
    ds = dataset_for(task_cfg, seed)
    seeded = suite_cfg.for_seed(seed)
    teacher, _ = train_step1(ds.training_view(), fresh_model(suite_cfg, ds.dim, ds.classes, seed), seeded.step1)
    before = teacher.checksum()
    train_dart(teacher, ds.target_view(), seeded.step2)
    after = teacher.checksum()
    # fixed point on the trained teacher and on the random-init check model
    labels, entropy = compute_pseudo_labels(teacher, ds.target_features)
    step2 = replace(seeded.step2, attack=seeded.attack.with_(epsilon=0.0))
    losses, grads = dart_batch(teacher, teacher.clone(), ds.target_features, labels, entropy, step2)
    loss = max(total_dart_loss(losses, step2), fixed_point(seed)["loss"])
    grad = max(max(float(np.max(np.abs(g))) for g in grads.values()), fixed_point(seed)["max_grad"])
    ok = before == after and loss <= 1e-10 and grad <= 1e-10
    recorder(3, "frozen teacher and eps=0 fixed point", ok,
             f"checksum unchanged {before == after}, loss {loss:.1e}, max grad {grad:.1e}")
    assert ok


def test_4_audits_hold_on_every_model(pilot, recorder):
    rows = pilot[0].rows
    bad = [r for r in rows if not (r["prop1_holds"] and r["thm1_holds"]
                                   and r["prop1_gap"] >= -1e-12 and r["thm1_gap"] >= -1e-12)]
    ok = not bad and len(rows) > 0
    worst = min(min(r["prop1_gap"], r["thm1_gap"]) for r in rows)
    recorder(4, "decomposition audits", ok, f"{len(rows)} rows, {len(bad)} violations, smallest slack {worst:.3g}")
    assert ok


def test_5_pilot_ordering(pilot, suite_cfg, recorder):
    report, elapsed, _ = pilot
    attack = suite_cfg.eval_attacks[0].method
    lines, ok = [], elapsed <= 600
    for task in TASKS:
        acc = {m: means(report.rows, task, m, attack) for m in METHODS}
        adv = [acc[m][1] for m in ("dart", "trades", "at", "none")]
        gaps = np.diff(adv[::-1])[::-1]
        dart_slack = acc["none"][0] - acc["dart"][0]
        at_drop = acc["none"][0] - acc["at"][0]
        task_ok = bool(np.all(gaps >= 2.0) and dart_slack <= 5.0 and at_drop >= 10.0)
        ok = ok and task_ok
        lines.append(f"{task}: adv " + " > ".join(f"{m}={acc[m][1]:.1f}" for m in ("dart", "trades", "at", "none"))
                     + f" (gaps {', '.join(f'{g:.1f}' for g in gaps)}), none-dart clean {dart_slack:.1f}, "
                     f"none-at clean {at_drop:.1f}")
    recorder(5, "pilot ordering", ok, "; ".join(lines) + f"; runtime {elapsed:.0f}s")
    assert ok


def test_6_pgd_transfer(pilot, recorder):
    rows = pilot[0].rows
    lines, ok = [], True
    for task in TASKS:
        _, ifgsm = means(rows, task, "dart", "ifgsm")
        _, pgd = means(rows, task, "dart", "pgd")
        ok = ok and ifgsm - pgd <= 5.0
        lines.append(f"{task}: ifgsm {ifgsm:.1f} pgd {pgd:.1f} (drop {ifgsm - pgd:.1f})")
    recorder(6, "DART under PGD", ok, "; ".join(lines))
    assert ok


def test_7_reports_reproducible(pilot, suite_cfg, tmp_path_factory, recorder):
    out_b = tmp_path_factory.mktemp("pilot_b")
    again = run_pilot(suite_cfg.tasks, suite_cfg, methods=METHODS)
    write_pilot(again, out_b, suite_cfg.eval_attacks[0].method)
    names = ("pilot_runs.csv", "pilot_summary.csv", "pilot_verdicts.csv")
    same = {n: (pilot[2] / n).read_bytes() == (out_b / n).read_bytes() for n in names}
    ok = all(same.values())
    recorder(7, "byte-identical reports", ok, ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in same.items()))
    assert ok


def test_8_pseudo_vs_true_attack_labels(pilot, suite_cfg, recorder):
    ablation = run_pilot(suite_cfg.tasks, suite_cfg, methods=(ABLATION,))
    attack = suite_cfg.eval_attacks[0].method
    lines, ok = [], True
    for task in TASKS:
        clean, adv = means(pilot[0].rows, task, "dart", attack)
        clean_gt, adv_gt = means(ablation.rows, task, ABLATION, attack)
        ok = ok and abs(clean - clean_gt) <= 2.0 and abs(adv - adv_gt) <= 2.0
        lines.append(f"{task}: clean {clean:.1f} vs {clean_gt:.1f}, adv {adv:.1f} vs {adv_gt:.1f}")
    recorder(8, "pseudo-label attack ablation", ok, "; ".join(lines))
    assert ok
