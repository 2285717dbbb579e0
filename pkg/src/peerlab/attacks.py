"""Gradient attacks under an l-infinity budget: FGSM, PGD, MI-FGSM, CW-l2, unbounded PGD.

All attacks work on numpy batches and a :class:`peerlab.nn.Model`; models
are used through zero-copy frozen views, so parameters are never touched.
Each step is projected first onto the eps-ball around the clean input and
then onto the input domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .losses import cross_entropy, kl_from_log
from .tensor import Tensor

OBJECTIVES = ("ce", "kl", "cw")


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters.

    ``objective`` is ``"ce"`` (cross-entropy to the label), ``"kl"`` (KL from
    a reference model's clean prediction to the attacked model's prediction)
    or ``"cw"`` (negative CW margin). ``clamp_domain=None`` disables the
    domain clamp; ``epsilon=math.inf`` disables the ball.
    """

    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    objective: str = "ce"
    random_start: bool = False
    momentum_decay: float = 1.0
    c_balance: float = 0.1
    clamp_domain: tuple | None = (0.0, 1.0)
    best_of_trace: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise AttackConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise AttackConfigError("steps must be >= 0")
        if self.steps > 0 and not self.step_size > 0:
            raise AttackConfigError("step_size must be > 0 when steps > 0")
        if self.objective not in OBJECTIVES:
            raise AttackConfigError(f"objective must be one of {OBJECTIVES}")
        if self.momentum_decay < 0:
            raise AttackConfigError("momentum_decay must be >= 0")
        if self.clamp_domain is not None:
            lo, hi = self.clamp_domain
            if not lo < hi:
                raise AttackConfigError("clamp_domain must be (low, high) with low < high")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_trace: list = field(default_factory=list)
    success_mask: np.ndarray | None = None


def pgd_config(eps: float, step: float, steps: int, **kw) -> AttackConfig:
    return AttackConfig(epsilon=eps, step_size=step, steps=steps, **kw)


def project(x: np.ndarray, x0: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Clip to the eps-ball around x0, then to the input domain."""
    if math.isfinite(cfg.epsilon):
        x = np.clip(x, x0 - cfg.epsilon, x0 + cfg.epsilon)
    if cfg.clamp_domain is not None:
        x = np.clip(x, *cfg.clamp_domain)
    return x


def cw_margin(logits: Tensor, labels, kappa: float = 0.0) -> Tensor:
    """Per-sample max(z_true - max_{j != true} z_j, -kappa)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    onehot = np.zeros((n, k), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    true = T.sum_(T.mul(logits, onehot), axis=1)
    # push the true class far below the others so max picks the best wrong class
    shift = (np.abs(logits.data).max() + 1.0) * 1e3
    other = T.max_(T.sub(logits, onehot * shift), axis=1)
    return T.clamp_min(T.sub(true, other), -kappa)


def _objective_and_grad(model, x: np.ndarray, y, cfg: AttackConfig, target=None):
    xt = Tensor(x, requires_grad=True)
    if cfg.objective == "ce":
        loss = cross_entropy(y, model(xt))
    elif cfg.objective == "kl":
        loss = kl_from_log(target, T.log_softmax(model(xt)))
    else:
        loss = T.scale(T.mean(cw_margin(model(xt), y)), -1.0)
    grads = T.backward(loss)
    return loss.item(), grads.get(xt, np.zeros_like(x))


def _prepare(model, x, cfg, reference):
    model = model.frozen()
    x0 = np.asarray(x, dtype=T.get_default_dtype())
    target = None
    if cfg.objective == "kl":
        # constant soft target: reference prediction on the clean batch
        target = T.log_softmax((reference or model).frozen()(x0)).detach()
    return model, x0, target


def _finish(model, x_adv, y, trace) -> AttackResult:
    pred = model.predict(x_adv)
    return AttackResult(x_adv=x_adv, loss_trace=trace, success_mask=pred != np.asarray(y))


def _iterate(model, x, y, cfg: AttackConfig, reference, momentum: bool, rng, trace_hook=None):
    model, x0, ref = _prepare(model, x, cfg, reference)
    xa = x0.copy()
    if cfg.random_start and math.isfinite(cfg.epsilon) and cfg.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        xa = project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), x0, cfg)
    trace = []
    g_acc = np.zeros_like(x0)
    best = xa.copy()
    best_loss = np.full(len(x0), -np.inf)
    for _ in range(cfg.steps):
        loss, grad = _objective_and_grad(model, xa, y, cfg, ref)
        trace.append(loss)
        if cfg.best_of_trace:
            per = _per_sample_loss(model, xa, y, cfg, ref)
            better = per > best_loss
            best[better] = xa[better]
            best_loss[better] = per[better]
        if momentum:
            l1 = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
            l1 = np.where(l1 > 0, l1, 1.0).reshape((-1,) + (1,) * (grad.ndim - 1))
            g_acc = cfg.momentum_decay * g_acc + grad / l1
            direction = g_acc
        else:
            direction = grad
        xa = project(xa + cfg.step_size * np.sign(direction), x0, cfg)
        if trace_hook is not None:
            trace_hook(xa, x0)
    if cfg.best_of_trace:
        per = _per_sample_loss(model, xa, y, cfg, ref)
        better = per > best_loss
        best[better] = xa[better]
        xa = best
    return model, xa, trace


def _per_sample_loss(model, x, y, cfg, ref) -> np.ndarray:
    logits = model(x)
    if cfg.objective == "cw":
        return -cw_margin(logits, y).data
    logq = T.log_softmax(logits).data
    if cfg.objective == "kl":
        logp = ref.data
        return (np.exp(logp) * (logp - logq)).sum(axis=1)
    return -logq[np.arange(len(y)), np.asarray(y)]


def fgsm(model, x, y, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """One signed-gradient step of size epsilon on the cross-entropy (steps is ignored)."""
    cfg = replace(cfg, steps=1, step_size=max(cfg.epsilon, 1e-300), objective="ce",
                  random_start=False, best_of_trace=False)
    m, xa, trace = _iterate(model, x, y, cfg, None, momentum=False, rng=None)
    return _finish(m, xa, y, trace)


def pgd(model, x, y, cfg: AttackConfig = AttackConfig(), reference=None, rng=None,
        trace_hook=None) -> AttackResult:
    """Projected signed-gradient ascent; returns the final iterate unless ``best_of_trace``.

    With ``objective="kl"`` the ascent target is KL(reference(x) || model(x_adv));
    ``reference`` defaults to the attacked model itself (the TRADES inner step).
    ``trace_hook(x_adv, x0)`` is called after every projected step.
    """
    if cfg.steps < 1:
        raise AttackConfigError("pgd needs steps >= 1")
    m, xa, trace = _iterate(model, x, y, cfg, reference, momentum=False, rng=rng, trace_hook=trace_hook)
    return _finish(m, xa, y, trace)


def mi_fgsm(model, x, y, cfg: AttackConfig = AttackConfig(steps=10), rng=None,
            trace_hook=None) -> AttackResult:
    """Momentum iterative FGSM: g <- mu * g + grad / ||grad||_1, then a signed step."""
    if cfg.steps < 1:
        raise AttackConfigError("mi_fgsm needs steps >= 1")
    m, xa, trace = _iterate(model, x, y, cfg, None, momentum=True, rng=rng, trace_hook=trace_hook)
    return _finish(m, xa, y, trace)


def cw_l2(model, x, y, cfg: AttackConfig = AttackConfig(), steps: int = 100, lr: float = 0.01,
          kappa: float = 0.0) -> AttackResult:
    """Penalty-form CW-l2: minimise ||delta||^2 + c * margin(x + delta) by gradient descent.

    delta starts at zero and is clipped after each step so x + delta stays in
    the domain. The eps-ball is not used.
    """
    if not cfg.c_balance > 0:
        raise AttackConfigError("c_balance must be > 0")
    model = model.frozen()
    x0 = np.asarray(x, dtype=T.get_default_dtype())
    delta = np.zeros_like(x0)
    trace = []
    for _ in range(steps):
        d = Tensor(delta, requires_grad=True)
        xt = T.add(x0, d)
        sq = T.sum_(T.mul(d, d))
        margin = T.sum_(cw_margin(model(xt), y, kappa))
        loss = T.add(sq, T.scale(margin, cfg.c_balance))
        trace.append(loss.item())
        delta = delta - lr * T.backward(loss)[d]
        if cfg.clamp_domain is not None:
            lo, hi = cfg.clamp_domain
            delta = np.clip(x0 + delta, lo, hi) - x0
    return _finish(model, x0 + delta, y, trace)


def unbounded_pgd(model, x, y, steps: int = 200, step_size: float = 2 / 255,
                  clamp_domain: tuple | None = (0.0, 1.0)) -> AttackResult:
    """PGD on the cross-entropy with no eps-ball; only the domain clamp remains."""
    cfg = AttackConfig(epsilon=math.inf, step_size=step_size, steps=steps, clamp_domain=clamp_domain)
    return pgd(model, x, y, cfg)


def run_attack(name: str, model, x, y, cfg: AttackConfig, reference=None, rng=None) -> AttackResult:
    """Dispatch by attack name: fgsm, pgd, mi-fgsm, cw-l2, unbounded."""
    if name == "fgsm":
        return fgsm(model, x, y, cfg)
    if name == "pgd":
        return pgd(model, x, y, cfg, reference=reference, rng=rng)
    if name == "mi-fgsm":
        return mi_fgsm(model, x, y, cfg, rng=rng)
    if name == "cw-l2":
        return cw_l2(model, x, y, cfg)
    if name == "unbounded":
        return unbounded_pgd(model, x, y, steps=cfg.steps, step_size=cfg.step_size,
                             clamp_domain=cfg.clamp_domain)
    raise AttackConfigError(f"unknown attack {name!r}")
