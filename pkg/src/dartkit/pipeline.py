"""End-to-end orchestration: pretrain, freeze, robustify, evaluate, report.

Every stage writes its artifacts under ``<out>/seed_<k>/`` and records its
status in ``<out>/manifest.json``. A stage is marked ``running`` before it
starts and ``complete`` only after its outputs are on disk, so an interrupted
run leaves an honest manifest and a re-run picks up from the last complete
stage.
"""

from __future__ import annotations

import json
import logging
import platform
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .data import DomainDataset, generate, load_csv
from .model import Model, build_model, load_checkpoint, save_checkpoint
from .pilot import RUN_HEADER, SUMMARY_HEADER, score_models, summarize
from .reporting import write_csv
from .train_robust import DART_HEADER, AT_HEADER, TRADES_HEADER, train_baseline, train_dart
from .train_uda import Step1Trace, train_step1

log = logging.getLogger(__name__)

STAGES = ("pretrain", "robustify", "evaluate")
MANIFEST = "manifest.json"
TRACE_HEADERS = {"dart": DART_HEADER, "at": AT_HEADER, "trades": TRADES_HEADER}


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int, cause: Exception):
        super().__init__(f"stage {stage} (seed {seed}) failed: {cause}")
        self.stage, self.seed = stage, seed


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seeds: list
    created: str = field(default_factory=_now)
    updated: str = ""
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__
    stages: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)

    def stage(self, seed: int, name: str) -> dict:
        return self.stages.setdefault(str(seed), {}).setdefault(name, {"status": "pending"})

    def mark(self, seed: int, name: str, status: str, **extra) -> None:
        entry = self.stage(seed, name)
        entry["status"] = status
        entry[{"running": "started", "complete": "finished", "failed": "finished"}[status]] = _now()
        entry.update(extra)

    def is_complete(self, seed: int, name: str) -> bool:
        return self.stage(seed, name)["status"] == "complete"

    @property
    def complete(self) -> bool:
        return all(self.is_complete(s, n) for s in self.seeds for n in STAGES) and bool(self.reports)

    def save(self, out_dir) -> Path:
        self.updated = _now()
        path = Path(out_dir) / MANIFEST
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, out_dir) -> "RunManifest":
        doc = json.loads((Path(out_dir) / MANIFEST).read_text())
        return cls(**doc)


def dataset_for(cfg, seed: int) -> DomainDataset:
    if cfg.uses_csv:
        return load_csv(cfg.source_csv, cfg.target_csv)
    return generate(replace(cfg.dataset, seed=seed))


def task_name(cfg) -> str:
    return "csv" if cfg.uses_csv else cfg.dataset.generator


def fresh_model(cfg, ds_dim: int, classes: int, seed: int) -> Model:
    m = cfg.model
    return build_model(ds_dim, classes, m.hidden, m.disc_hidden, m.teacher, seed)


def pretrain_stage(cfg, seed: int, ds: DomainDataset, ckpt: Path, trace_path: Path) -> Model:
    seeded = cfg.for_seed(seed)
    model = fresh_model(cfg, ds.dim, ds.classes, seed)
    y_eval = ds.target_labels_eval
    monitor = None if y_eval is None else (lambda mdl: float(np.mean(mdl.predict(ds.target_features) == y_eval)))
    step1 = replace(seeded.step1, checkpoint=str(ckpt))
    teacher, trace = train_step1(ds.training_view(), model, step1, monitor=monitor,
                                 provenance=_provenance(cfg, seed, ds))
    write_csv(trace.rows, Step1Trace.header, trace_path)
    return teacher


def _provenance(cfg, seed: int, ds: DomainDataset) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "version": __version__,
        "seed": seed,
        "feature_bounds": ds.feature_bounds.tolist(),
    }


def robustify_stage(cfg, seed: int, teacher: Model, ds: DomainDataset, seed_dir: Path) -> Model:
    seeded = cfg.for_seed(seed)
    monitor = _step2_monitor(ds, seeded.attack) if ds.target_labels_eval is not None else None
    if cfg.method == "dart":
        student, rows = train_dart(teacher, ds.target_view(), seeded.step2, monitor=monitor)
    else:
        model = fresh_model(cfg, ds.dim, ds.classes, seed)
        student, rows = train_baseline(cfg.method, model, ds.training_view(), seeded.baseline, monitor=monitor)
    write_csv(rows, TRACE_HEADERS[cfg.method], seed_dir / "step2_trace.csv")
    save_checkpoint(student, seed_dir / "student.json",
                    {**_provenance(cfg, seed, ds), "stage": "robustify", "method": cfg.method})
    return student


def _step2_monitor(ds: DomainDataset, attack):
    """Eval-only per-epoch target accuracy; never fed back into training."""
    from .audit import adversarial_targets

    y = ds.eval_labels()

    def monitor(model):
        clean = float(np.mean(model.predict(ds.target_features) == y))
        adv = float(np.mean(model.predict(adversarial_targets(model, ds, attack)) == y))
        return clean, adv

    return monitor


def evaluate_stage(cfg, seed: int, teacher: Model, student: Model, ds: DomainDataset, seed_dir: Path) -> list[dict]:
    rows = score_models(task_name(cfg), seed, ds, {"none": teacher, cfg.method: student}, cfg.for_seed(seed).eval_attacks)
    write_csv(rows, RUN_HEADER, seed_dir / "eval.csv")
    return rows


def run_pipeline(cfg, out=None, seeds=None, fresh: bool = False) -> RunManifest:
    """Run every stage for every seed; resumes from completed stages unless ``fresh``."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(cfg.seeds if seeds is None else seeds)
    manifest = None
    if not fresh and (out / MANIFEST).exists():
        old = RunManifest.load(out)
        if old.config_hash == cfg.config_hash():
            manifest = old
            manifest.seeds = sorted(set(manifest.seeds) | set(seeds))
        else:
            log.warning("config changed since the last run in %s; starting over", out)
    if manifest is None:
        manifest = RunManifest(cfg.config_hash(), __version__, seeds)
    manifest.reports = {}
    (out / "config.ini").write_text(cfg.text)
    all_rows = []
    for seed in seeds:
        all_rows += _run_seed(cfg, seed, out, manifest)
    summary = summarize(all_rows)
    manifest.reports = {
        "runs": str(write_csv(all_rows, RUN_HEADER, out / "report_runs.csv")),
        "summary": str(write_csv(summary, SUMMARY_HEADER, out / "report_summary.csv")),
    }
    attack = cfg.eval_attacks[0].method
    manifest.reports["figure"] = str(plotting.pilot_bars(summary, attack, out / "report_accuracy.png"))
    manifest.reports["bounds_figure"] = str(plotting.bound_terms(summary, attack, out / "report_bound_terms.png"))
    manifest.save(out)
    return manifest


def _run_seed(cfg, seed: int, out: Path, manifest: RunManifest) -> list[dict]:
    seed_dir = out / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    ds = dataset_for(cfg, seed)
    seeded = cfg.for_seed(seed)
    manifest.stages.setdefault(str(seed), {})["rng"] = {
        "data": None if cfg.uses_csv else seed,
        "model_init": seed,
        "step1_batches": seeded.step1.seed,
        "step2_batches": seeded.step2.seed,
        "attack": seeded.attack.seed,
        "eval_attacks": [a.seed for a in seeded.eval_attacks],
    }
    teacher_ckpt, student_ckpt = seed_dir / "teacher.json", seed_dir / "student.json"

    def stage(name, fn, ckpt=None):
        manifest.mark(seed, name, "running")
        manifest.save(out)
        try:
            result = fn()
        except Exception as exc:
            manifest.mark(seed, name, "failed", error=str(exc))
            manifest.save(out)
            raise StageError(name, seed, exc) from exc
        manifest.mark(seed, name, "complete", **({"checkpoint": str(ckpt)} if ckpt else {}))
        manifest.save(out)
        return result

    if manifest.is_complete(seed, "pretrain") and teacher_ckpt.exists():
        teacher = load_checkpoint(teacher_ckpt, expected_classes=ds.classes)
        log.info("seed %d: reusing teacher %s", seed, teacher_ckpt)
    else:
        teacher = stage("pretrain", lambda: pretrain_stage(cfg, seed, ds, teacher_ckpt, seed_dir / "step1_trace.csv"), teacher_ckpt)
    if manifest.is_complete(seed, "robustify") and student_ckpt.exists():
        student = load_checkpoint(student_ckpt, expected_classes=ds.classes)
    else:
        student = stage("robustify", lambda: robustify_stage(cfg, seed, teacher, ds, seed_dir), student_ckpt)
    return stage("evaluate", lambda: evaluate_stage(cfg, seed, teacher, student, ds, seed_dir))
