"""Fast invariant suite behind ``dartkit check``.

Each check returns a :class:`CheckResult`; nothing here trains a model for
long, so the whole suite runs in seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attacks import METHODS, AttackConfig, attack_bounds, perturb
from .audit import TOL, prop1_terms, thm1_terms
from .model import build_model
from .train_robust import Step2Config, dart_batch, total_dart_loss

FD_STEP = 1e-5
FD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""


def rel_error(analytic, numeric) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n)) / scale)


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def _away_from_zero(rng, shape):
    z = rng.normal(size=shape)
    return np.sign(z) * (0.05 + np.abs(z))


def _case_affine(rng):
    b, i, o = rng.integers(1, 6, size=3)
    x, w, bias = rng.normal(size=(b, i)), rng.normal(size=(i, o)), rng.normal(size=(1, o))
    u = rng.normal(size=(b, o))
    f = lambda: float(np.sum(u * T.affine_forward(x, w, bias)))
    gx, gw, gb = T.affine_backward(u, x, w)
    return max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, w)), rel_error(gb, numeric_grad(f, bias)))


def _case_relu(rng):
    x = _away_from_zero(rng, (4, 5))
    u = rng.normal(size=x.shape)
    f = lambda: float(np.sum(u * T.relu_forward(x)))
    return rel_error(T.relu_backward(u, x), numeric_grad(f, x))


def _case_cross_entropy(rng):
    b, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    z, y = rng.normal(scale=2, size=(b, c)), rng.integers(0, c, size=b)
    _, g = T.cross_entropy(z, y)
    return rel_error(g, numeric_grad(lambda: T.cross_entropy(z, y)[0], z))


def _case_kl(rng):
    b, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    t, s = rng.normal(scale=2, size=(b, c)), rng.normal(scale=2, size=(b, c))
    tau = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
    w = rng.uniform(size=b)
    _, g = T.kl_divergence(t, s, tau, w)
    return rel_error(g, numeric_grad(lambda: T.kl_divergence(t, s, tau, w)[0], s))


def _case_mse(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, g = T.mse(a, b)
    return rel_error(g, numeric_grad(lambda: T.mse(a, b)[0], b))


def _case_grl(rng):
    # backward must equal -lambda times the true derivative of the identity forward
    x, u = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    lam = float(rng.uniform(0.1, 2.0))
    fd = numeric_grad(lambda: float(np.sum(u * T.gradient_reversal_forward(x))), x)
    return rel_error(T.gradient_reversal_backward(u, lam), -lam * fd)


def _case_bce(rng):
    z = rng.normal(scale=3, size=(6, 1))
    t = rng.integers(0, 2, size=(6, 1)).astype(float)
    _, g = T.sigmoid_bce(z, t)
    return rel_error(g, numeric_grad(lambda: T.sigmoid_bce(z, t)[0], z))


def _small_model(rng, conditional=False):
    d, c = int(rng.integers(2, 5)), int(rng.integers(2, 4))
    m = build_model(d, c, hidden=(6, 5), disc_hidden=4, teacher="cdan" if conditional else "dann",
                    seed=int(rng.integers(1 << 30)))
    for k in m.params:
        m.params[k] = m.params[k] + rng.normal(scale=0.1, size=m.params[k].shape)
    return m, d, c


def _case_model_ce(rng):
    m, d, c = _small_model(rng)
    x, y = rng.normal(size=(5, d)), rng.integers(0, c, size=5)
    grads = m.zero_grads()
    cache = m.forward_cached(x)
    _, g = T.cross_entropy(cache.prediction.logits, y)
    gx = m.backward(cache, grad_logits=g, grads=grads)
    f = lambda: T.cross_entropy(m.logits(x), y)[0]
    errs = [rel_error(gx, numeric_grad(f, x))]
    errs += [rel_error(grads[k], numeric_grad(f, m.params[k])) for k in m.params if not k.startswith("discriminator")]
    return max(errs)


def _case_model_domain(rng, conditional=False):
    # grl_lambda = -1 turns the reversal into a plain pass-through so the
    # full chain can be compared to central differences
    m, d, c = _small_model(rng, conditional)
    x = rng.normal(size=(5, d))
    t = rng.integers(0, 2, size=(5, 1)).astype(float)
    probs = m.forward(x).probs  # constant under the conditional detach

    def f():
        feats, _ = m._run("encoder", x)
        logit, _ = m.domain_logit(feats, probs, -1.0)
        return T.sigmoid_bce(logit, t)[0]

    grads = m.zero_grads()
    cache = m.forward_cached(x)
    logit, dcache = m.domain_logit(cache.prediction.features, probs, -1.0)
    _, g = T.sigmoid_bce(logit, t)
    gf = m.domain_backward(g, dcache, grads)
    gx = m.backward(cache, grad_features=gf, grads=grads)
    errs = [rel_error(gx, numeric_grad(f, x))]
    errs += [rel_error(grads[k], numeric_grad(f, m.params[k])) for k in m.params if not k.startswith("classifier")]
    return max(errs)


def _case_dart(rng):
    teacher, d, c = _small_model(rng)
    teacher.freeze()
    student = teacher.clone()
    for k in student.params:
        student.params[k] = student.params[k] + rng.normal(scale=0.2, size=student.params[k].shape)
    x = rng.normal(size=(6, d))
    labels, entropy = teacher.predict(x), teacher.forward(x).entropy
    cfg = Step2Config(attack=AttackConfig("ifgsm", 0.0), temperature=float(rng.choice([1.0, 2.0])),
                      mse_weight=float(rng.uniform(0.5, 2.0)))
    losses, grads = dart_batch(teacher, student, x, labels, entropy, cfg)
    f = lambda: total_dart_loss(dart_batch(teacher, student, x, labels, entropy, cfg)[0], cfg)
    return max(rel_error(grads[k], numeric_grad(f, student.params[k])) for k in student.params
               if not k.startswith("discriminator"))


GRADIENT_CASES = {
    "affine": _case_affine,
    "relu": _case_relu,
    "cross_entropy": _case_cross_entropy,
    "kl_divergence": _case_kl,
    "mse": _case_mse,
    "gradient_reversal": _case_grl,
    "sigmoid_bce": _case_bce,
    "model_classifier_chain": _case_model_ce,
    "model_domain_chain": _case_model_domain,
    "model_domain_chain_conditional": lambda rng: _case_model_domain(rng, True),
    "dart_step2_loss": _case_dart,
}


def gradient_errors(instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per operation over ``instances`` seeded draws."""
    out = {}
    for i, (name, case) in enumerate(GRADIENT_CASES.items()):
        out[name] = max(case(np.random.default_rng([seed, i, k])) for k in range(instances))
    return out


def attack_soundness(total: int = 10_000, seed: int = 0, epsilons=(0.01, 0.05, 0.1)) -> dict:
    """Generate ``total`` adversarials over every method and epsilon and count violations."""
    rng = np.random.default_rng(seed)
    model = build_model(2, 3, hidden=(16, 8), seed=seed)
    combos = [(m, e) for m in METHODS for e in epsilons]
    per = -(-total // len(combos))
    n = violations = 0
    worst = 0.0
    for k, (method, eps) in enumerate(combos):
        x = rng.uniform(-1, 1, size=(per, 2))
        y = rng.integers(0, 3, size=per)
        bounds = np.array([[-1.0, 1.0], [-1.0, 1.0]])
        cfg = AttackConfig(method, eps, step_size=eps / 4, steps=10, seed=seed + k)
        x_adv = perturb(model, x, y, cfg, bounds)
        lim = attack_bounds(bounds, cfg)
        dist = np.max(np.abs(x_adv - x), axis=1)
        bad = (dist > eps + 1e-12) | np.any(x_adv < lim[:, 0], axis=1) | np.any(x_adv > lim[:, 1], axis=1)
        violations += int(bad.sum())
        worst = max(worst, float(dist.max() - eps))
        n += per
    x = rng.uniform(-1, 1, size=(50, 2))
    zero = all(
        np.array_equal(perturb(model, x, np.zeros(50, int), AttackConfig(m, 0.0)), x) for m in METHODS
    )
    return {"generated": n, "violations": violations, "max_excess": worst, "eps0_identity": zero}


def fixed_point(seed: int = 0) -> dict:
    """Clone of a frozen teacher at epsilon 0: every Step-2 term and gradient vanishes."""
    rng = np.random.default_rng(seed)
    teacher = build_model(2, 2, seed=seed)
    teacher.freeze()
    student = teacher.clone()
    x = rng.normal(size=(64, 2))
    pred = teacher.forward(x)
    cfg = Step2Config(attack=AttackConfig("pgd", 0.0))
    losses, grads = dart_batch(teacher, student, x, pred.pseudo_labels, pred.entropy, cfg)
    return {
        "loss": total_dart_loss(losses, cfg),
        "max_grad": max(float(np.max(np.abs(g))) for g in grads.values()),
    }


def audit_bruteforce(trials: int = 2000, seed: int = 0) -> int:
    """Random labelings (including small, tie-heavy ones); returns the number of violated audits."""
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(trials):
        n, c = int(rng.integers(1, 30)), int(rng.integers(2, 5))
        clean, adv, star, y = (rng.integers(0, c, size=n) for _ in range(4))
        p1, t1 = prop1_terms(clean, adv, y), thm1_terms(clean, adv, star, y)
        if not (p1["holds"] and t1["holds"] and p1["gap"] >= -TOL and t1["gap"] >= -TOL):
            failures += 1
    return failures


def run_checks(seed: int = 0) -> list[CheckResult]:
    results = []
    t0 = time.perf_counter()
    errs = gradient_errors(seed=seed)
    worst = max(errs, key=errs.get)
    results.append(CheckResult("gradients_vs_finite_differences", errs[worst] <= FD_TOL, errs[worst],
                               f"worst op {worst}; {len(errs)} ops x 20 instances; {time.perf_counter() - t0:.1f}s"))
    s = attack_soundness(seed=seed)
    results.append(CheckResult("attack_ball_and_bounds", s["violations"] == 0, s["violations"],
                               f"{s['generated']} adversarials, max excess {s['max_excess']:.2e}"))
    results.append(CheckResult("attack_eps0_identity", s["eps0_identity"], float(s["eps0_identity"])))
    fp = fixed_point(seed)
    results.append(CheckResult("step2_fixed_point", fp["loss"] <= 1e-10 and fp["max_grad"] <= 1e-10,
                               max(fp["loss"], fp["max_grad"]), f"loss {fp['loss']:.1e}, max grad {fp['max_grad']:.1e}"))
    bad = audit_bruteforce(seed=seed)
    results.append(CheckResult("risk_audits_bruteforce", bad == 0, bad, "2000 random labelings"))
    return results
