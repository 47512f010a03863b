"""None / +AT / +Trades / +DART comparison over tasks and seeds."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import plotting
from .audit import adversarial_targets, prop1_terms, thm1_terms
from .data import DomainDataset, ShiftSpec, generate
from .model import build_model
from .reporting import write_csv
from .train_robust import train_baseline, train_dart
from .train_uda import train_step1

log = logging.getLogger(__name__)

METHODS = ("none", "at", "trades", "dart")
ABLATION = "dart_gt"

RUN_HEADER = (
    "task", "method", "seed", "attack", "eps", "clean_acc", "adv_acc",
    "err_adv", "err_clean", "adv_clean_disagree",
    "attack_defense", "benign_maintenance", "ideal_classifier",
    "prop1_lhs", "prop1_rhs", "prop1_gap", "thm1_lhs", "thm1_rhs", "thm1_gap",
    "prop1_holds", "thm1_holds",
)
SUMMARY_HEADER = (
    "task", "method", "attack", "seeds", "clean_mean", "clean_sd", "adv_mean", "adv_sd",
    "attack_defense", "benign_maintenance", "ideal_classifier", "lhs", "adv_clean_disagree",
)
VERDICT_HEADER = ("task", "verdict", "gating", "passed", "detail")

# pinned desk-scale thresholds, in accuracy points
ADV_GAP = 2.0
DART_CLEAN_SLACK = 5.0
AT_CLEAN_DROP = 10.0
NONE_COLLAPSE = 0.5


@dataclass
class PilotReport:
    rows: list
    summary: list
    verdicts: list

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts if v["gating"])


def train_methods(ds: DomainDataset, seeded, model_spec, methods=METHODS) -> dict:
    """Train every requested method on one dataset; returns ``{method: model}``."""
    def fresh():
        return build_model(ds.dim, ds.classes, model_spec.hidden, model_spec.disc_hidden, model_spec.teacher, seeded.seed)

    teacher, _ = train_step1(ds.training_view(), fresh(), seeded.step1)
    models = {"none": teacher}
    for method in methods:
        if method == "dart":
            models["dart"] = train_dart(teacher, ds.target_view(), seeded.step2)[0]
        elif method == ABLATION:
            # ablation only: attack directed by ground truth instead of pseudo-labels
            models[ABLATION] = train_dart(teacher, ds.target_view(), seeded.step2, label_override=ds.eval_labels())[0]
        elif method in ("at", "trades"):
            models[method] = train_baseline(method, fresh(), ds.training_view(), seeded.baseline)[0]
    teacher.verify_frozen()
    return models


def score_models(task: str, seed: int, ds: DomainDataset, models: dict, attacks) -> list[dict]:
    y = ds.eval_labels()
    x = ds.target_features
    star = models["none"].predict(x)
    rows = []
    for method, model in models.items():
        clean = model.predict(x)
        for atk in attacks:
            adv = model.predict(adversarial_targets(model, ds, atk))
            p1 = prop1_terms(clean, adv, y)
            t1 = thm1_terms(clean, adv, star, y)
            rows.append({
                "task": task, "method": method, "seed": seed, "attack": atk.method, "eps": float(atk.epsilon),
                "clean_acc": float(np.mean(clean == y)), "adv_acc": float(np.mean(adv == y)),
                "err_adv": p1["err_adv"], "err_clean": p1["err_clean"], "adv_clean_disagree": p1["adv_clean_disagree"],
                "attack_defense": t1["attack_defense"], "benign_maintenance": t1["benign_maintenance"],
                "ideal_classifier": t1["ideal_classifier"],
                "prop1_lhs": p1["lhs"], "prop1_rhs": p1["rhs"], "prop1_gap": p1["gap"],
                "thm1_lhs": t1["lhs"], "thm1_rhs": t1["rhs"], "thm1_gap": t1["gap"],
                "prop1_holds": p1["holds"], "thm1_holds": t1["holds"],
            })
    return rows


def run_one(task: str, spec: ShiftSpec, cfg, seed: int, methods=METHODS) -> list[dict]:
    try:
        seeded = cfg.for_seed(seed)
        ds = generate(replace(spec, seed=seed))
        models = train_methods(ds, seeded, cfg.model, methods)
        return score_models(task, seed, ds, models, seeded.eval_attacks)
    except Exception as exc:
        raise RuntimeError(f"pilot task {task!r}, seed {seed}: {exc}") from exc


def _run_one_packed(args):
    return run_one(*args)


def run_pilot(tasks: dict, cfg, seeds=None, methods=METHODS, jobs: int = 1) -> PilotReport:
    """Train and score every method on every ``(task, seed)`` pair."""
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    jobs_list = [(name, spec, cfg, seed, methods) for name, spec in tasks.items() for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            chunks = list(pool.map(_run_one_packed, jobs_list))
    else:
        chunks = []
        for job in jobs_list:
            log.info("pilot: task %s seed %d", job[0], job[3])
            chunks.append(_run_one_packed(job))
    rows = [r for chunk in chunks for r in chunk]
    summary = summarize(rows)
    primary = cfg.eval_attacks[0].method
    return PilotReport(rows, summary, verdicts(summary, primary))


def summarize(rows: list[dict]) -> list[dict]:
    keys = sorted({(r["task"], r["method"], r["attack"]) for r in rows},
                  key=lambda k: (k[0], _method_rank(k[1]), k[2]))
    out = []
    for task, method, attack in keys:
        sub = [r for r in rows if (r["task"], r["method"], r["attack"]) == (task, method, attack)]
        clean = np.array([r["clean_acc"] for r in sub])
        adv = np.array([r["adv_acc"] for r in sub])
        out.append({
            "task": task, "method": method, "attack": attack, "seeds": len(sub),
            "clean_mean": float(clean.mean()), "clean_sd": float(clean.std()),
            "adv_mean": float(adv.mean()), "adv_sd": float(adv.std()),
            **{k: float(np.mean([r[k] for r in sub]))
               for k in ("attack_defense", "benign_maintenance", "ideal_classifier", "adv_clean_disagree")},
            "lhs": float(np.mean([r["thm1_lhs"] for r in sub])),
        })
    return out


def _method_rank(method: str) -> int:
    order = (*METHODS, ABLATION)
    return order.index(method) if method in order else len(order)


def verdicts(summary: list[dict], attack: str) -> list[dict]:
    """Ordering verdicts per task on mean accuracies (in points)."""
    out = []
    for task in sorted({r["task"] for r in summary}):
        acc = {r["method"]: r for r in summary if r["task"] == task and r["attack"] == attack}
        if not all(m in acc for m in METHODS):
            continue
        clean = {m: 100 * acc[m]["clean_mean"] for m in METHODS}
        adv = {m: 100 * acc[m]["adv_mean"] for m in METHODS}
        chain = ("dart", "trades", "at", "none")
        gaps = [adv[a] - adv[b] for a, b in zip(chain, chain[1:])]
        adv_txt = " > ".join(f"{m}={adv[m]:.1f}" for m in chain)
        clean_txt = " ".join(f"{m}={clean[m]:.1f}" for m in ("none", "dart", "trades", "at"))

        def add(name, gating, passed, detail):
            out.append({"task": task, "verdict": name, "gating": gating, "passed": bool(passed), "detail": detail})

        add("adv_order", True, all(g > 0 for g in gaps), adv_txt)
        add("adv_gaps_ge_2", True, all(g >= ADV_GAP for g in gaps), "gaps " + ", ".join(f"{g:.1f}" for g in gaps))
        add("clean_none_minus_dart_le_5", True, clean["none"] - clean["dart"] <= DART_CLEAN_SLACK, clean_txt)
        add("clean_none_minus_at_ge_10", True, clean["none"] - clean["at"] >= AT_CLEAN_DROP, clean_txt)
        add("clean_order", False,
            clean["none"] >= clean["dart"] > clean["trades"] > clean["at"], clean_txt)
        add("none_adv_below_half_clean", False, adv["none"] < NONE_COLLAPSE * clean["none"],
            f"adv={adv['none']:.1f} clean={clean['none']:.1f}")
    return out


def write_pilot(report: PilotReport, out_dir, attack: str | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "runs": write_csv(report.rows, RUN_HEADER, out / "pilot_runs.csv"),
        "summary": write_csv(report.summary, SUMMARY_HEADER, out / "pilot_summary.csv"),
        "verdicts": write_csv(report.verdicts, VERDICT_HEADER, out / "pilot_verdicts.csv"),
    }
    attack = attack or (report.summary[0]["attack"] if report.summary else "ifgsm")
    paths["figure"] = plotting.pilot_bars(report.summary, attack, out / "pilot_accuracy.png")
    paths["bounds_figure"] = plotting.bound_terms(report.summary, attack, out / "pilot_bound_terms.png")
    lines = ["# Pilot summary", ""]
    for v in report.verdicts:
        mark = "PASS" if v["passed"] else "FAIL"
        gate = "" if v["gating"] else " (informational)"
        lines.append(f"- [{mark}] {v['task']}: {v['verdict']}{gate} -- {v['detail']}")
    lines.append("")
    lines.append(f"overall: {'PASS' if report.passed else 'FAIL'}")
    paths["doc"] = out / "pilot_summary.md"
    paths["doc"].write_text("\n".join(lines) + "\n")
    return paths
