"""Measurement battery: accuracy tables, cross-model robustness, cosine tables,
the gradient-obfuscation checks, transfer attacks, the robust-overfitting gap
and saliency maps.

Every function is read-only over its models and deterministic given the
attack configs (attacks run without random start unless the config asks for
one, and then draw from the config seed).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, fgsm, pgd, run_attack, unbounded_pgd
from .data import Dataset
from .losses import cross_entropy
from .nn import Model, Params
from .tensor import ContractError, ShapeError, Tensor


class EvaluationError(ValueError):
    pass


def _xy(data):
    """Accept a :class:`Dataset` or an ``(inputs, labels)`` pair."""
    if isinstance(data, Dataset):
        x, y = data.inputs, data.labels
    else:
        x, y = data
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y)
    if len(x) == 0:
        raise EvaluationError("cannot evaluate on empty data")
    if len(x) != len(y):
        raise EvaluationError("inputs and labels differ in length")
    return x, y


def accuracy(model: Model, data) -> float:
    """Fraction of argmax-correct predictions."""
    x, y = _xy(data)
    return float(np.mean(model.predict(x) == y))


def adversarial_batch(model: Model, x, y, cfg: AttackConfig, attack: str = "pgd") -> np.ndarray:
    """Adversarial examples against ``model``; ``epsilon=inf`` selects the unbounded attack."""
    if attack == "pgd" and not math.isfinite(cfg.epsilon):
        return unbounded_pgd(model, x, y, steps=cfg.steps, step_size=cfg.step_size,
                             clamp_domain=cfg.clamp_domain).x_adv
    if attack == "pgd" and cfg.epsilon == 0:
        return np.array(x, dtype=np.float64, copy=True)
    return run_attack(attack, model, x, y, cfg).x_adv


def robust_accuracy(model: Model, data, cfg: AttackConfig, attack: str = "pgd") -> float:
    """White-box accuracy on examples generated against ``model`` itself."""
    x, y = _xy(data)
    return float(np.mean(model.predict(adversarial_batch(model, x, y, cfg, attack)) == y))


@dataclass
class RobustnessReport:
    clean: float
    accuracies: dict
    n: int
    configs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise EvaluationError("sample count must be positive")
        for name, acc in [("clean", self.clean), *self.accuracies.items()]:
            if not 0.0 <= acc <= 1.0:
                raise EvaluationError(f"accuracy {name}={acc} outside [0, 1]")

    def as_dict(self) -> dict:
        return {"clean": self.clean, "n": self.n, **self.accuracies}


def standard_attacks(epsilon: float = 8 / 255, step_size: float = 2 / 255) -> dict:
    """The FGSM / PGD-20 columns of the usual comparison table."""
    return {
        "fgsm": ("fgsm", AttackConfig(epsilon=epsilon, step_size=step_size, steps=1)),
        "pgd20": ("pgd", AttackConfig(epsilon=epsilon, step_size=step_size, steps=20)),
    }


def robustness_report(model: Model, data, attacks: dict | None = None) -> RobustnessReport:
    """Clean accuracy plus one accuracy per named ``(attack, config)`` entry."""
    x, y = _xy(data)
    attacks = standard_attacks() if attacks is None else attacks
    accs = {name: robust_accuracy(model, (x, y), cfg, kind) for name, (kind, cfg) in attacks.items()}
    configs = {name: {"attack": kind, **asdict(cfg)} for name, (kind, cfg) in attacks.items()}
    return RobustnessReport(accuracy(model, (x, y)), accs, len(y), configs)


# ---------------------------------------------------------------- cross robustness


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


@dataclass
class CrossRobustness:
    """``matrix[i, j]``: accuracy of defender ``names[i]`` on examples crafted against ``names[j]``."""

    names: list
    matrix: np.ndarray
    clean: dict
    digests: dict = field(default_factory=dict)

    def __post_init__(self):
        k = len(self.names)
        if self.matrix.shape != (k, k):
            raise ShapeError("cross_robustness", self.matrix.shape, (k, k))

    def rob(self, defender: str, source: str) -> float:
        return float(self.matrix[self.names.index(defender), self.names.index(source)])

    def as_dict(self) -> dict:
        out = {f"clean_{n}": v for n, v in self.clean.items()}
        for i, f in enumerate(self.names):
            for j, g in enumerate(self.names):
                out[f"rob_{f}_on_{g}"] = float(self.matrix[i, j])
        return out


def cross_robustness(models: dict, data, cfg: AttackConfig, attack: str = "pgd") -> CrossRobustness:
    """Generate each source's adversarial batch once and score every defender on it."""
    x, y = _xy(data)
    if not models:
        raise EvaluationError("need at least one model")
    names = list(models)
    shapes = {m.spec.input_shape for m in models.values()}
    if len(shapes) != 1:
        raise ShapeError("cross_robustness", *sorted(shapes))
    batches, digests = {}, {}
    for g in names:
        batches[g] = adversarial_batch(models[g], x, y, cfg, attack)
        digests[g] = _digest(batches[g])
    matrix = np.zeros((len(names), len(names)))
    for j, g in enumerate(names):
        for i, f in enumerate(names):
            matrix[i, j] = np.mean(models[f].predict(batches[g]) == y)
        if _digest(batches[g]) != digests[g]:
            raise ContractError(f"adversarial batch of {g!r} changed while being reused")
    clean = {f: accuracy(models[f], (x, y)) for f in names}
    return CrossRobustness(names, matrix, clean, digests)


# ---------------------------------------------------------------- cosine table


@dataclass
class CosineTable:
    values: dict
    skipped: dict
    counts: dict


def _row_cosines(a: np.ndarray, b: np.ndarray):
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return cos, int((~ok).sum())


def penultimate_cosine(model: Model, x, variants: dict, pairs=None) -> CosineTable:
    """Mean cosine similarity of penultimate features between input variants.

    ``variants`` maps names to arrays shaped like ``x``; the clean input is
    available as ``"x"``. ``pairs`` defaults to every variant against ``"x"``.
    Pairs where either feature vector has zero norm are skipped and counted.
    All samples are averaged, correctly classified or not.
    """
    x = np.asarray(x, dtype=np.float64)
    inputs = {"x": x}
    for name, v in variants.items():
        v = np.asarray(v, dtype=np.float64)
        if v.shape != x.shape:
            raise ShapeError("penultimate_cosine", x.shape, v.shape)
        inputs[name] = v
    feats = {name: model.features(v).data.reshape(len(v), -1) for name, v in inputs.items()}
    pairs = [("x", n) for n in variants] if pairs is None else list(pairs)
    values, skipped, counts = {}, {}, {}
    for a, b in pairs:
        cos, skip = _row_cosines(feats[a], feats[b])
        key = f"{a}|{b}"
        values[key] = float(cos.mean()) if cos.size else float("nan")
        skipped[key] = skip
        counts[key] = int(cos.size)
    return CosineTable(values, skipped, counts)


# ---------------------------------------------------------------- obfuscation battery


@dataclass(frozen=True)
class BatteryThresholds:
    """Pass/fail thresholds of the obfuscation checks (accuracies as fractions)."""

    max_short_long_gap: float = 0.03
    max_unbounded_acc: float = 0.01
    short_steps: int = 10
    long_steps: int = 200
    unbounded_steps: int = 200
    transfer_steps: int = 20


@dataclass
class Check:
    name: str
    passed: bool | None
    values: dict
    threshold: str

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "threshold": self.threshold, **self.values}


@dataclass
class BatteryReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def check(self, name: str) -> Check:
        return next(c for c in self.checks if c.name == name)

    def payload(self) -> dict:
        out = {}
        for c in self.checks:
            for k, v in c.values.items():
                out[f"{c.name}.{k}"] = v
            out[f"{c.name}.passed"] = c.passed
        return out


def obfuscation_battery(model: Model, data, cfg: AttackConfig = AttackConfig(),
                        thresholds: BatteryThresholds = BatteryThresholds(),
                        surrogates: dict | None = None) -> BatteryReport:
    """Four checks that robustness is not an artefact of broken gradients.

    1. ``pgd_short_vs_long``: |acc(PGD-short) - acc(PGD-long)| within the gap threshold.
    2. ``unbounded``: accuracy under PGD with no eps-ball at most the threshold.
    3. ``fgsm_vs_pgd``: FGSM accuracy at least PGD-20 accuracy.
    4. ``transfer_vs_whitebox``: accuracy on examples from every surrogate at
       least the white-box PGD accuracy. Without surrogates the check is
       reported with ``passed=None``.

    ``cfg`` supplies epsilon, step size and domain; step counts come from
    ``thresholds``.
    """
    x, y = _xy(data)
    base = replace(cfg, objective="ce", random_start=False, best_of_trace=False)

    def acc(z):
        return float(np.mean(model.predict(z) == y))

    short = acc(pgd(model, x, y, replace(base, steps=thresholds.short_steps)).x_adv)
    long = acc(pgd(model, x, y, replace(base, steps=thresholds.long_steps)).x_adv)
    unb = acc(unbounded_pgd(model, x, y, steps=thresholds.unbounded_steps, step_size=base.step_size,
                            clamp_domain=base.clamp_domain).x_adv)
    one = acc(fgsm(model, x, y, base).x_adv)
    white = acc(pgd(model, x, y, replace(base, steps=thresholds.transfer_steps)).x_adv)
    transfer = None
    if surrogates:
        cfgs = {"pgd": replace(base, steps=thresholds.transfer_steps)}
        transfer = {name: v for (name, _), v in transfer_attack_eval(model, surrogates, (x, y), cfgs).items()}
    return judge_battery(short, long, unb, one, white, transfer, thresholds)


def judge_battery(short: float, long: float, unbounded: float, fgsm_acc: float, pgd_acc: float,
                  transfer: dict | None = None,
                  thresholds: BatteryThresholds = BatteryThresholds()) -> BatteryReport:
    """Turn the battery's accuracies (fractions) into pass/fail checks.

    ``transfer`` maps surrogate names to the target's accuracy on their
    examples; ``None`` reports the transfer check with ``passed=None``.
    """
    gap = abs(short - long)
    checks = [
        Check("pgd_short_vs_long", gap <= thresholds.max_short_long_gap + 1e-12,
              {"short": short, "long": long, "gap": gap}, f"gap <= {thresholds.max_short_long_gap}"),
        Check("unbounded", unbounded <= thresholds.max_unbounded_acc + 1e-12, {"acc": unbounded},
              f"acc <= {thresholds.max_unbounded_acc}"),
        Check("fgsm_vs_pgd", fgsm_acc >= pgd_acc, {"fgsm": fgsm_acc, "pgd": pgd_acc}, "fgsm >= pgd"),
    ]
    if transfer:
        values = {**transfer, "whitebox": pgd_acc}
        checks.append(Check("transfer_vs_whitebox", min(transfer.values()) >= pgd_acc, values,
                            "transfer >= whitebox"))
    else:
        checks.append(Check("transfer_vs_whitebox", None, {"whitebox": pgd_acc}, "no surrogate given"))
    return BatteryReport(checks)


def transfer_attack_eval(target: Model, surrogates: dict, data, cfgs: dict, attack: str = "pgd") -> dict:
    """Accuracy of ``target`` on examples crafted against each surrogate.

    Returns ``{(surrogate_name, cfg_name): accuracy}``.
    """
    x, y = _xy(data)
    out = {}
    for sname, surrogate in surrogates.items():
        for cname, cfg in cfgs.items():
            x_adv = adversarial_batch(surrogate, x, y, cfg, attack)
            out[(sname, cname)] = float(np.mean(target.predict(x_adv) == y))
    return out


# ---------------------------------------------------------------- robust overfitting


def _log_value(log, key: str) -> float:
    row = log if isinstance(log, dict) else log.as_dict()
    if key not in row:
        raise EvaluationError(f"metric {key!r} missing from epoch log")
    return float(row[key])


def robust_overfit_gap(logs, metrics=None, select: str = "robust_acc", decimals: int = 12) -> dict:
    """Best-versus-final values per metric.

    The best epoch is the first epoch with the highest ``select`` value (the
    PGD-10 validation accuracy). For every metric, ``best`` is its value at
    that epoch, ``final`` its value at the last epoch and ``diff = best -
    final``, rounded to ``decimals`` places so values given with two decimals
    subtract exactly. Negative diffs are allowed.
    """
    logs = list(logs)
    if not logs:
        raise EvaluationError("robust_overfit_gap needs at least one epoch")
    metrics = [select] if metrics is None else list(metrics)
    scores = [_log_value(log, select) for log in logs]
    best_i = int(np.argmax(scores))
    out = {}
    for key in metrics:
        best, final = _log_value(logs[best_i], key), _log_value(logs[-1], key)
        out[key] = {"best": best, "final": final, "diff": round(best - final, decimals), "best_epoch": best_i}
    return out


# ---------------------------------------------------------------- saliency


@dataclass
class SaliencyResult:
    maps: np.ndarray
    degenerate: np.ndarray


def input_gradient(model: Model, x, y) -> np.ndarray:
    """Gradient of the batch-summed cross-entropy with respect to the input."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = T.scale(cross_entropy(y, model.frozen()(xt)), float(len(y)))
    return T.backward(loss).get(xt, np.zeros_like(xt.data))


def saliency_map(model: Model, x, y) -> SaliencyResult:
    """Normalised per-pixel saliency of the input gradient.

    Per sample: clip the gradient to its mean +- 3 standard deviations (over
    that map), sum absolute values across channels and min-max scale to
    [0, 1]. Maps with zero-variance gradient come back all zero and
    flagged. Flat inputs are treated as one channel.
    """
    x = np.asarray(x, dtype=np.float64)
    g = input_gradient(model, x, y)
    g = g.reshape(len(g), 1, 1, -1) if g.ndim == 2 else g
    if g.ndim != 4:
        raise ShapeError("saliency_map", x.shape)
    maps = np.zeros((g.shape[0],) + g.shape[2:])
    flags = np.zeros(len(g), dtype=bool)
    for i, gi in enumerate(g):
        mu, sd = gi.mean(), gi.std()
        if not sd > 0:
            flags[i] = True
            continue
        m = np.abs(np.clip(gi, mu - 3 * sd, mu + 3 * sd)).sum(axis=0)
        lo, hi = m.min(), m.max()
        if hi > lo:
            maps[i] = (m - lo) / (hi - lo)
        else:
            flags[i] = True
    if x.ndim == 2:
        maps = maps.reshape(len(maps), -1)
    return SaliencyResult(maps, flags)


# ---------------------------------------------------------------- loss grid


def loss_grid(model: Model, data, span: float = 1.0, points: int = 11, seed: int = 0) -> np.ndarray:
    """Cross-entropy on a 2-D grid of weight perturbations, for external plotting.

    Two random directions are drawn per tensor and rescaled to that tensor's
    norm; entry ``[i, j]`` is the loss at ``theta + a_i * d1 + b_j * d2``
    with ``a, b`` evenly spaced in ``[-span, span]``.
    """
    x, y = _xy(data)
    rng = np.random.default_rng(seed)
    base = model.params.arrays()
    dirs = []
    for _ in range(2):
        d = {}
        for name, w in base.items():
            r = rng.standard_normal(w.shape)
            norm = np.linalg.norm(r)
            d[name] = r * (np.linalg.norm(w) / norm if norm > 0 else 0.0)
        dirs.append(d)
    grid = np.linspace(-span, span, points)
    out = np.zeros((points, points))
    for i, a in enumerate(grid):
        for j, b in enumerate(grid):
            arrays = {k: w + a * dirs[0][k] + b * dirs[1][k] for k, w in base.items()}
            m = Model(model.spec, Params.from_arrays(arrays, model.params.seed, requires_grad=False))
            out[i, j] = cross_entropy(y, m(x)).item()
    return out
