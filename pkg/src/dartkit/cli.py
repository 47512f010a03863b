"""Command-line entry point: ``dartkit <subcommand> --config FILE [--seed N] [--out PATH]``.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 verdict failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, plotting
from .config import ConfigError, parse_config, parse_config_text
from .data import CsvError, generate, load_target_csv, save_csv
from .model import CheckpointError, FreezeViolation, load_checkpoint, save_checkpoint
from .reporting import read_csv, write_csv

log = logging.getLogger("dartkit")

OUT_ENV = "DARTKIT_OUT"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERDICT = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def load_cfg(args):
    if args.config is None:
        return parse_config_text("", "<defaults>")
    return parse_config(args.config)


def out_path(args, cfg, default_name: str) -> Path:
    """``--out`` wins; otherwise ``$DARTKIT_OUT`` (or the config's ``out``) joined with a default name."""
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV) or cfg.out
    return Path(root) / default_name


def seed_of(args, cfg) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _dataset(cfg, seed):
    from .pipeline import dataset_for

    return dataset_for(cfg, seed)


# -- subcommands ------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .pipeline import pretrain_stage

    cfg = load_cfg(args)
    seed = seed_of(args, cfg)
    ckpt = out_path(args, cfg, f"teacher_seed{seed}.json")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    ds = _dataset(cfg, seed)
    trace = ckpt.with_name(ckpt.stem + "_trace.csv")
    teacher = pretrain_stage(cfg, seed, ds, ckpt, trace)
    print(f"teacher checkpoint: {ckpt} (sha256 {teacher.checksum()[:12]})")
    print(f"step 1 trace: {trace}")
    return EXIT_OK


def cmd_robustify(args) -> int:
    from .pipeline import TRACE_HEADERS, _step2_monitor, fresh_model
    from .train_robust import train_baseline, train_dart

    cfg = load_cfg(args)
    if args.method:
        cfg = replace(cfg, method=args.method)
    seed = seed_of(args, cfg)
    seeded = cfg.for_seed(seed)
    teacher = load_checkpoint(args.teacher)
    if not teacher.frozen:
        raise UsageError(f"{args.teacher}: checkpoint is not a frozen teacher")
    ckpt = out_path(args, cfg, f"student_{cfg.method}_seed{seed}.json")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    bounds = teacher.provenance.get("feature_bounds")
    monitor = None
    if cfg.method == "dart":
        if args.target_csv or cfg.uses_csv:
            # Step 2 only reads the target file; no source file is opened
            view, y_eval = load_target_csv(args.target_csv or cfg.target_csv, teacher.classes, bounds=bounds)
        else:
            ds = _dataset(cfg, seed)
            view, y_eval = ds.target_view(), ds.target_labels_eval
            if y_eval is not None:
                monitor = _step2_monitor(ds, seeded.attack)
        if view.target_features.shape[1] != teacher.input_dim:
            raise UsageError(f"target has {view.target_features.shape[1]} features, teacher expects {teacher.input_dim}")
        student, rows = train_dart(teacher, view, seeded.step2, monitor=monitor)
    else:
        ds = _dataset(cfg, seed)
        if ds.dim != teacher.input_dim or ds.classes != teacher.classes:
            raise UsageError("dataset does not match the teacher's input dimension / classes")
        model = fresh_model(cfg, ds.dim, ds.classes, seed)
        student, rows = train_baseline(cfg.method, model, ds.training_view(), seeded.baseline,
                                       monitor=_step2_monitor(ds, seeded.attack) if ds.target_labels_eval is not None else None)
    prov = dict(teacher.provenance, stage="robustify", method=cfg.method, seed=seed, config_hash=cfg.config_hash())
    save_checkpoint(student, ckpt, prov)
    trace = ckpt.with_name(ckpt.stem + "_trace.csv")
    write_csv(rows, TRACE_HEADERS[cfg.method], trace)
    print(f"student checkpoint: {ckpt}")
    print(f"step 2 trace: {trace}")
    return EXIT_OK


def cmd_attack_eval(args) -> int:
    from .pilot import RUN_HEADER, score_models

    cfg = load_cfg(args)
    seed = seed_of(args, cfg)
    model = load_checkpoint(args.model)
    teacher = load_checkpoint(args.teacher) if args.teacher else model
    ds = _dataset(cfg, seed)
    if ds.target_labels_eval is None:
        raise UsageError("attack-eval needs target labels (the evaluation file must carry a label column)")
    name = args.name or Path(args.model).stem
    rows = score_models("csv" if cfg.uses_csv else cfg.dataset.generator, seed, ds,
                        {"none": teacher, name: model} if args.teacher else {"none": model},
                        cfg.for_seed(seed).eval_attacks)
    path = out_path(args, cfg, f"attack_eval_seed{seed}.csv")
    write_csv(rows, RUN_HEADER, path)
    for r in rows:
        print(f"{r['method']:>10s} {r['attack']:>6s}@{r['eps']:g}: clean {100 * r['clean_acc']:.1f}%  "
              f"adv {100 * r['adv_acc']:.1f}%  prop1 {'ok' if r['prop1_holds'] else 'VIOLATED'}  "
              f"thm1 {'ok' if r['thm1_holds'] else 'VIOLATED'}")
    print(f"report: {path}")
    return EXIT_OK


def cmd_pilot(args) -> int:
    from .pilot import ABLATION, METHODS, run_pilot, write_pilot

    cfg = load_cfg(args)
    tasks = cfg.tasks or {("csv" if cfg.uses_csv else cfg.dataset.generator): cfg.dataset}
    if any(spec is None for spec in tasks.values()):
        raise UsageError("pilot runs need generated datasets (generator = csv is not supported here)")
    if args.task:
        missing = set(args.task) - set(tasks)
        if missing:
            raise UsageError(f"unknown task(s) {sorted(missing)}; config defines {sorted(tasks)}")
        tasks = {k: v for k, v in tasks.items() if k in args.task}
    seeds = [args.seed] if args.seed is not None else None
    methods = METHODS + ((ABLATION,) if args.ablation else ())
    report = run_pilot(tasks, cfg, seeds, methods, jobs=args.jobs)
    out = out_path(args, cfg, "pilot")
    paths = write_pilot(report, out, cfg.eval_attacks[0].method)
    print(paths["doc"].read_text(), end="")
    return EXIT_OK if report.passed else EXIT_VERDICT


def cmd_report(args) -> int:
    from .pilot import SUMMARY_HEADER, summarize
    from .pipeline import run_pipeline

    cfg = load_cfg(args)
    out = out_path(args, cfg, "run")
    if args.from_csv:
        rows = [_typed(r) for r in read_csv(args.from_csv)]
        summary = summarize(rows)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(summary, SUMMARY_HEADER, out / "report_summary.csv")
        attack = rows[0]["attack"] if rows else "ifgsm"
        plotting.pilot_bars(summary, attack, out / "report_accuracy.png")
        plotting.bound_terms(summary, attack, out / "report_bound_terms.png")
        print(f"re-rendered summary and figures in {out}")
        return EXIT_OK
    seeds = [args.seed] if args.seed is not None else None
    manifest = run_pipeline(cfg, out, seeds, fresh=args.fresh)
    for key, path in sorted(manifest.reports.items()):
        print(f"{key}: {path}")
    print(f"manifest: {out / 'manifest.json'}")
    return EXIT_OK


_INT_COLS = {"seed"}
_STR_COLS = {"task", "method", "attack"}


def _typed(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if k in _STR_COLS:
            out[k] = v
        elif k in _INT_COLS:
            out[k] = int(v)
        elif v in ("true", "false"):
            out[k] = v == "true"
        else:
            out[k] = float(v)
    return out


def cmd_gen_data(args) -> int:
    cfg = load_cfg(args)
    if cfg.uses_csv:
        raise UsageError("gen-data needs a generator, not generator = csv")
    seed = seed_of(args, cfg)
    out = out_path(args, cfg, f"data_seed{seed}")
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(replace(cfg.dataset, seed=seed))
    save_csv(ds, out / "source.csv", out / "target.csv")
    print(f"wrote {len(ds.source_features)} source and {len(ds.target_features)} target rows "
          f"({ds.dim} features) to {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    cfg = load_cfg(args)
    results = run_checks(seed_of(args, cfg))
    rows = [{"check": r.name, "passed": r.passed, "value": float(r.value), "detail": r.detail} for r in results]
    if args.out or os.environ.get(OUT_ENV):
        path = write_csv(rows, ("check", "passed", "value", "detail"), out_path(args, cfg, "checks.csv"))
        print(f"report: {path}")
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.value:g} {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERDICT


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
    common.add_argument("--out", help=f"output path (default: ${OUT_ENV} or the config's [run] out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dartkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="step 1: train and freeze the UDA teacher")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("robustify", parents=[common], help="step 2: robustify a frozen teacher")
    s.add_argument("--teacher", required=True, help="frozen teacher checkpoint")
    s.add_argument("--method", choices=("dart", "at", "trades"))
    s.add_argument("--target-csv", help="target-domain CSV (dart only; no source file is read)")
    s.set_defaults(fn=cmd_robustify)

    s = sub.add_parser("attack-eval", parents=[common], help="clean/adversarial accuracy and risk audits")
    s.add_argument("--model", required=True, help="checkpoint to evaluate")
    s.add_argument("--teacher", help="reference (ideal-classifier) checkpoint for the decomposition audit")
    s.add_argument("--name", help="method label in the report")
    s.set_defaults(fn=cmd_attack_eval)

    s = sub.add_parser("pilot", parents=[common], help="None/+AT/+Trades/+DART comparison with verdicts")
    s.add_argument("--task", action="append", help="restrict to a [task:NAME] section (repeatable)")
    s.add_argument("--jobs", type=int, default=1, help="parallel (task, seed) workers")
    s.add_argument("--ablation", action="store_true", help="also train DART with ground-truth attack labels")
    s.set_defaults(fn=cmd_pilot)

    s = sub.add_parser("report", parents=[common], help="full pipeline (resumable) with CSV reports and figures")
    s.add_argument("--fresh", action="store_true", help="ignore completed stages in the output directory")
    s.add_argument("--from-csv", help="only re-render summary and figures from an existing runs CSV")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("gen-data", parents=[common], help="write the configured synthetic dataset as CSV")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("check", parents=[common], help="run the invariant suite")
    s.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CsvError, CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FreezeViolation, RuntimeError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
