"""Sectioned key-value experiment configuration with typed validation.

Files use INI syntax (``[section]`` headers, ``key = value`` lines, ``#``
comments). Every key has a declared type and default; unknown sections or
keys, type errors and range violations are all collected and reported
together with their line numbers.
"""

from __future__ import annotations

import configparser
import difflib
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import METHODS as ATTACK_METHODS
from .attacks import AttackConfig
from .data import GENERATORS, ShiftSpec
from .train_robust import BaselineConfig, Step2Config
from .train_uda import Step1Config


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    text = text.strip()
    m = re.fullmatch(r"(-?\d+)\s*\.\.\s*(-?\d+)", text)
    if m:
        return tuple(range(int(m.group(1)), int(m.group(2)) + 1))
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strs(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _str(text: str) -> str:
    return text.strip()


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _choice(*options):
    def check(v):
        return v in options
    check.describe = f"one of {', '.join(options)}"
    return check


# key -> (parser, default, check or None, description of the check)
SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "generator": (_str, "two_moons_rotate", _choice(*GENERATORS, "csv"), None),
        "rotation": (float, 30.0, lambda v: 0 <= v < 180, "in [0, 180)"),
        "shift": (_floats, (1.0,), None, None),
        "cov_scale": (float, 1.0, _pos, "> 0"),
        "noise_sd": (float, 0.25, _nonneg, ">= 0"),
        "m": (int, 400, _pos, ">= 1"),
        "n": (int, 400, _pos, ">= 1"),
        "classes": (int, 2, lambda v: v >= 2, ">= 2"),
        "dim": (int, 2, _pos, ">= 1"),
        "scale": (float, 1.0, _pos, "> 0"),
        "weak_dims": (int, 100, _nonneg, ">= 0"),
        "weak_gap": (float, 0.04, _nonneg, ">= 0"),
        "weak_sd": (float, 0.2, _nonneg, ">= 0"),
        "source_csv": (_str, "", None, None),
        "target_csv": (_str, "", None, None),
    },
    "model": {
        "hidden": (_ints, (64, 32), lambda v: len(v) >= 1 and min(v) >= 1, "positive integers"),
        "disc_hidden": (int, 32, _pos, ">= 1"),
        "teacher": (_str, "dann", _choice("dann", "cdan"), None),
    },
    "step1": {
        "epochs": (int, 60, _pos, ">= 1"),
        "batch_size": (int, 64, _pos, ">= 1"),
        "lr": (float, 0.05, _nonneg, ">= 0"),
        "momentum": (float, 0.9, lambda v: 0 <= v < 1, "in [0, 1)"),
        "weight_decay": (float, 5e-4, _nonneg, ">= 0"),
        "grl_lambda": (float, 1.0, _nonneg, ">= 0"),
        "grl_schedule": (_str, "constant", _choice("constant", "warmup"), None),
    },
    "step2": {
        "method": (_str, "dart", _choice("dart", "at", "trades"), None),
        "epochs": (int, 60, _pos, ">= 1"),
        "batch_size": (int, 64, _pos, ">= 1"),
        "lr": (float, 0.03, _nonneg, ">= 0"),
        "momentum": (float, 0.9, lambda v: 0 <= v < 1, "in [0, 1)"),
        "weight_decay": (float, 5e-4, _nonneg, ">= 0"),
        "temperature": (float, 2.0, _pos, "> 0"),
        "mse_weight": (float, 1.0, _nonneg, ">= 0"),
        "attack_target": (_str, "student", _choice("student", "teacher"), None),
        "pseudo_label_policy": (_str, "once", _choice("once", "per_epoch"), None),
    },
    "baseline": {
        "epochs": (int, 60, _pos, ">= 1"),
        "batch_size": (int, 64, _pos, ">= 1"),
        "lr": (float, 0.05, _nonneg, ">= 0"),
        "momentum": (float, 0.9, lambda v: 0 <= v < 1, "in [0, 1)"),
        "weight_decay": (float, 5e-4, _nonneg, ">= 0"),
        "grl_lambda": (float, 1.0, _nonneg, ">= 0"),
        "trades_beta": (float, 1.0, _nonneg, ">= 0"),
    },
    "attack": {
        "method": (_str, "ifgsm", _choice(*ATTACK_METHODS), None),
        "epsilon": (float, 0.1, _nonneg, ">= 0"),
        "step_size": (float, 0.05, _pos, "> 0"),
        "steps": (int, 40, _pos, ">= 1"),
        "random_start": (_bool, True, None, None),
        "clamp": (_str, "feature_bounds", _choice("feature_bounds", "none"), None),
    },
    "eval": {
        "attacks": (_strs, ("ifgsm", "pgd"), lambda v: all(a in ATTACK_METHODS for a in v), f"subset of {ATTACK_METHODS}"),
    },
    "run": {
        "seeds": (_ints, (0, 1, 2, 3, 4), lambda v: len(v) >= 1, "at least one seed"),
        "out": (_str, "runs", None, None),
    },
}

TASK_PREFIX = "task:"


@dataclass
class ModelSpec:
    hidden: tuple = (64, 32)
    disc_hidden: int = 32
    teacher: str = "dann"


@dataclass
class ExperimentConfig:
    dataset: ShiftSpec
    source_csv: str
    target_csv: str
    model: ModelSpec
    step1: Step1Config
    step2: Step2Config
    baseline: BaselineConfig
    method: str
    attack: AttackConfig
    eval_attacks: tuple
    seeds: tuple
    out: str
    tasks: dict = field(default_factory=dict)
    text: str = ""

    @property
    def uses_csv(self) -> bool:
        return self.dataset is None

    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def for_seed(self, seed: int) -> "SeededConfig":
        return SeededConfig(self, seed)


class SeededConfig:
    """Per-seed views of the stage configs; every RNG consumer gets ``seed``."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        from dataclasses import replace

        self.seed = seed
        self.attack = replace(cfg.attack, seed=seed)
        self.step1 = replace(cfg.step1, seed=seed, teacher=cfg.model.teacher)
        self.step2 = replace(cfg.step2, seed=seed, attack=self.attack)
        self.baseline = replace(cfg.baseline, seed=seed, attack=self.attack)
        self.eval_attacks = tuple(replace(a, seed=seed) for a in cfg.eval_attacks)


def _line_of(lines: list[str], section: str, key: str | None) -> int | None:
    current = None
    for no, raw in enumerate(lines, 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return no
        elif key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return no
    return None


def _loc(path, lines, section, key=None) -> str:
    no = _line_of(lines, section, key)
    where = f"{path}:{no}" if no else str(path)
    return f"{where}: [{section}]" + (f" {key}" if key else "")


def _parse_section(path, lines, parser, section: str, schema_name: str, errors: list) -> dict:
    schema = SCHEMA[schema_name]
    values = {k: spec[1] for k, spec in schema.items()}
    if not parser.has_section(section):
        return values
    for key, raw in parser.items(section):
        if key not in schema:
            hint = difflib.get_close_matches(key, schema.keys(), n=1)
            suggestion = f"; did you mean '{hint[0]}'?" if hint else ""
            errors.append(f"{_loc(path, lines, section, key)}: unknown key '{key}'{suggestion}")
            continue
        conv, _, check, describe = schema[key]
        try:
            val = conv(raw)
        except ValueError:
            errors.append(f"{_loc(path, lines, section, key)}: cannot parse {raw!r} as {getattr(conv, '__name__', 'value').lstrip('_')}")
            continue
        if check is not None and not check(val):
            desc = describe or getattr(check, "describe", "valid")
            errors.append(f"{_loc(path, lines, section, key)}: value {raw!r} out of range (must be {desc})")
            continue
        values[key] = val
    return values


def _shift_spec(d: dict, seed: int = 0) -> ShiftSpec | None:
    if d["generator"] == "csv":
        return None
    return ShiftSpec(
        generator=d["generator"], rotation=d["rotation"], shift=tuple(d["shift"]),
        cov_scale=d["cov_scale"], noise_sd=d["noise_sd"], m=d["m"], n=d["n"],
        classes=d["classes"], dim=d["dim"], scale=d["scale"], weak_dims=d["weak_dims"],
        weak_gap=d["weak_gap"], weak_sd=d["weak_sd"], seed=seed,
    )


def parse_config_text(text: str, path="<config>") -> ExperimentConfig:
    lines = text.splitlines()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError([f"{path}: {exc}"]) from None

    errors: list[str] = []
    for section in parser.sections():
        if section not in SCHEMA and not section.startswith(TASK_PREFIX):
            hint = difflib.get_close_matches(section, SCHEMA.keys(), n=1)
            suggestion = f"; did you mean '[{hint[0]}]'?" if hint else ""
            errors.append(f"{_loc(path, lines, section)}: unknown section{suggestion}")

    vals = {name: _parse_section(path, lines, parser, name, name, errors) for name in SCHEMA}
    tasks = {}
    for section in parser.sections():
        if section.startswith(TASK_PREFIX):
            merged = dict(vals["dataset"])
            merged.update({k: v for k, v in _parse_section(path, lines, parser, section, "dataset", errors).items()
                           if parser.has_option(section, k)})
            tasks[section[len(TASK_PREFIX):].strip()] = merged

    ds = vals["dataset"]
    for name, d in [("dataset", ds), *((TASK_PREFIX + k, v) for k, v in tasks.items())]:
        if d["generator"] == "csv" and not (d["source_csv"] and d["target_csv"]):
            errors.append(f"{_loc(path, lines, name, 'generator')}: csv generator needs source_csv and target_csv")
        if d["generator"] == "two_moons_rotate" and (d["classes"] != 2 or d["dim"] != 2):
            errors.append(f"{_loc(path, lines, name)}: two_moons_rotate needs classes = 2 and dim = 2")
        if d["generator"] == "gaussian_mixture_shift" and len(d["shift"]) not in (1, d["dim"]):
            errors.append(f"{_loc(path, lines, name, 'shift')}: shift needs 1 or {d['dim']} entries")
    if errors:
        raise ConfigError(errors)

    a = vals["attack"]
    attack = AttackConfig(a["method"], a["epsilon"], a["step_size"], a["steps"], a["random_start"], a["clamp"])
    eval_attacks = tuple(attack.with_(method=m) if m != "fgsm" else AttackConfig("fgsm", a["epsilon"], clamp=a["clamp"])
                         for m in vals["eval"]["attacks"])
    s1, s2, bl = vals["step1"], vals["step2"], vals["baseline"]
    m = vals["model"]
    return ExperimentConfig(
        dataset=_shift_spec(ds),
        source_csv=ds["source_csv"],
        target_csv=ds["target_csv"],
        model=ModelSpec(tuple(m["hidden"]), m["disc_hidden"], m["teacher"]),
        step1=Step1Config(
            epochs=s1["epochs"], batch_size=s1["batch_size"], lr=s1["lr"], momentum=s1["momentum"],
            weight_decay=s1["weight_decay"], grl_lambda=s1["grl_lambda"], grl_schedule=s1["grl_schedule"],
            teacher=m["teacher"],
        ),
        step2=Step2Config(
            epochs=s2["epochs"], batch_size=s2["batch_size"], lr=s2["lr"], momentum=s2["momentum"],
            weight_decay=s2["weight_decay"], temperature=s2["temperature"], attack=attack,
            attack_target=s2["attack_target"], pseudo_label_policy=s2["pseudo_label_policy"],
            mse_weight=s2["mse_weight"],
        ),
        baseline=BaselineConfig(
            epochs=bl["epochs"], batch_size=bl["batch_size"], lr=bl["lr"], momentum=bl["momentum"],
            weight_decay=bl["weight_decay"], grl_lambda=bl["grl_lambda"], attack=attack,
            trades_beta=bl["trades_beta"],
        ),
        method=s2["method"],
        attack=attack,
        eval_attacks=eval_attacks,
        seeds=tuple(vals["run"]["seeds"]),
        out=vals["run"]["out"],
        tasks={name: _shift_spec(d) for name, d in tasks.items()},
        text=text,
    )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read ({exc.strerror})"]) from None
    return parse_config_text(text, path)
