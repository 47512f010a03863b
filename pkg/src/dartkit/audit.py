"""Clean/adversarial evaluation and empirical audits of the risk decompositions.

Every risk is a 0-1 disagreement rate between two labelings of the same
target sample, so the triangle inequalities behind both decompositions hold
exactly on the empirical distribution. Comparisons are made on integer
mismatch counts; the float rates are reported alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, perturb
from .data import DomainDataset
from .model import Model

TOL = 1e-12


def disagreement(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"labelings differ in length: {a.shape} vs {b.shape}")
    return float(np.mean(a != b))


def _count(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def attack_name(cfg: AttackConfig) -> str:
    return f"{cfg.method}@{cfg.epsilon:g}"


@dataclass
class RiskReport:
    clean_acc: float
    adv_acc: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)


def adversarial_targets(model: Model, dataset: DomainDataset, cfg: AttackConfig) -> np.ndarray:
    """Target samples attacked with ground-truth labels against ``model``."""
    return perturb(model, dataset.target_features, dataset.eval_labels(), cfg, dataset.feature_bounds)


def evaluate(model: Model, dataset: DomainDataset, attack_cfgs: Sequence[AttackConfig] = ()) -> RiskReport:
    y = dataset.eval_labels()
    x = dataset.target_features
    report = RiskReport(clean_acc=float(np.mean(model.predict(x) == y)))
    for cfg in attack_cfgs:
        x_adv = adversarial_targets(model, dataset, cfg)
        report.adv_acc[attack_name(cfg)] = float(np.mean(model.predict(x_adv) == y))
    return report


# -- audits on label arrays -------------------------------------------------------


def prop1_terms(clean_pred, adv_pred, truth) -> dict:
    """Entangled decomposition: adversarial + clean risk vs clean/adv disagreement.

    ``lhs = e(h(x~), f) + e(h(x), f)``;
    ``rhs = e(h(x~), h(x)) + 2 e(h(x), f)``.
    """
    n = len(truth)
    c_adv_f, c_clean_f, c_adv_clean = _count(adv_pred, truth), _count(clean_pred, truth), _count(adv_pred, clean_pred)
    row = {
        "err_adv": c_adv_f / n,
        "err_clean": c_clean_f / n,
        "adv_clean_disagree": c_adv_clean / n,
    }
    row["lhs"] = row["err_adv"] + row["err_clean"]
    row["rhs"] = row["adv_clean_disagree"] + 2 * row["err_clean"]
    row["gap"] = row["rhs"] - row["lhs"]
    row["holds"] = bool(c_adv_f <= c_adv_clean + c_clean_f and row["lhs"] <= row["rhs"] + TOL)
    return row


def thm1_terms(clean_pred, adv_pred, star_pred, truth) -> dict:
    """Disentangled decomposition through a reference labeling ``star_pred``.

    Checks the two per-term steps as well as the final bound:
    ``e(h(x~), f) <= e(h(x~), h*) + e(h*, f)`` (adversarial step),
    ``e(h(x), f) <= e(h(x), h*) + e(h*, f)`` (clean step),
    ``lhs <= attack_defense + benign_maintenance + 2 e(h*, f)``.
    """
    n = len(truth)
    c_adv_f = _count(adv_pred, truth)
    c_clean_f = _count(clean_pred, truth)
    c_adv_star = _count(adv_pred, star_pred)
    c_clean_star = _count(clean_pred, star_pred)
    c_star_f = _count(star_pred, truth)
    row = {
        "err_adv": c_adv_f / n,
        "err_clean": c_clean_f / n,
        "attack_defense": c_adv_star / n,
        "benign_maintenance": c_clean_star / n,
        "ideal_classifier": 2 * c_star_f / n,
        "err_star": c_star_f / n,
    }
    row["lhs"] = row["err_adv"] + row["err_clean"]
    row["mid"] = row["attack_defense"] + row["err_star"] + row["err_clean"]
    row["rhs"] = row["attack_defense"] + row["benign_maintenance"] + row["ideal_classifier"]
    row["gap"] = row["rhs"] - row["lhs"]
    row["adv_step_holds"] = bool(c_adv_f <= c_adv_star + c_star_f and row["err_adv"] <= row["attack_defense"] + row["err_star"] + TOL)
    row["clean_step_holds"] = bool(
        c_clean_f <= c_clean_star + c_star_f and row["err_clean"] <= row["benign_maintenance"] + row["err_star"] + TOL
    )
    row["holds"] = bool(
        row["adv_step_holds"] and row["clean_step_holds"]
        and row["lhs"] <= row["mid"] + TOL and row["mid"] <= row["rhs"] + TOL
    )
    return row


# -- audits on models --------------------------------------------------------------


def audit_prop1(h: Model, dataset: DomainDataset, attack_cfg: AttackConfig, x_adv=None) -> dict:
    y = dataset.eval_labels()
    if x_adv is None:
        x_adv = adversarial_targets(h, dataset, attack_cfg)
    return prop1_terms(h.predict(dataset.target_features), h.predict(x_adv), y)


def audit_thm1(h: Model, h_star: Model, dataset: DomainDataset, attack_cfg: AttackConfig, x_adv=None) -> dict:
    """``h_star`` stands in for the ideal target classifier (the frozen teacher)."""
    y = dataset.eval_labels()
    x = dataset.target_features
    if x_adv is None:
        x_adv = adversarial_targets(h, dataset, attack_cfg)
    return thm1_terms(h.predict(x), h.predict(x_adv), h_star.predict(x), y)
