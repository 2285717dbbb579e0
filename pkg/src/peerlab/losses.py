"""Scalar training objectives with explicit stop-gradient placement.

Every reduction over the batch is a mean. KL terms are evaluated from
log-probabilities, ``KL(p||q) = sum p * (log p - log q)``, so saturated
logits never produce ``log(0)``.

Models are passed as :class:`peerlab.nn.Model`. Where a prediction acts as
a constant target it is detached before entering the loss, which is what
lets one backward pass over :func:`combined_loss` deliver each network
exactly the gradient of its own objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ParameterError, Tensor

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class LossSpec:
    """Loss weights and temperatures; the defaults are the CIFAR-10 setting."""

    gamma1: float = 1.0
    gamma2: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.0
    lambda3: float = 1.0
    tau_peer: float = 1.0
    tau_student: float = 5.0
    # when True the natural-image branch of the student's consistency term is a constant
    detach_clean_branch: bool = False

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ParameterError(f"{name} must be a finite non-negative number, got {v}")
        if not (self.tau_peer > 0 and self.tau_student > 0):
            raise ParameterError("temperatures must be strictly positive")
        if self.lambda1 <= 0 and self.lambda2 <= 0:
            raise ParameterError("at least one of lambda1, lambda2 must be positive")


def _one_hot(labels, classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ParameterError(f"label out of range [0, {classes})")
    out = np.zeros((labels.size, classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(labels, logits: Tensor) -> Tensor:
    """Mean of -log p[label] with p = softmax(logits), p floored at 1e-12."""
    logp = T.log_softmax(logits)
    picked = T.sum_(T.mul(logp, _one_hot(labels, logits.shape[1], logp.data.dtype)), axis=1)
    return -T.mean(T.clamp_min(picked, _LOG_FLOOR))


def kl_from_log(target_logp: Tensor, pred_logp: Tensor) -> Tensor:
    """Batch-mean KL(target || pred) from row-wise log-probabilities."""
    if target_logp.shape != pred_logp.shape:
        raise T.ShapeError("kl", target_logp.shape, pred_logp.shape)
    rows = T.sum_(T.mul(T.exp(target_logp), T.sub(target_logp, pred_logp)), axis=-1)
    return T.mean(rows)


def kl_div(target_prob, pred_prob) -> Tensor:
    """Batch-mean KL(target || pred) for probability rows (floored at 1e-12)."""
    target_prob, pred_prob = T._as_tensor(target_prob), T._as_tensor(pred_prob)
    for p in (target_prob, pred_prob):
        if not np.allclose(p.data.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
            raise ContractError("kl_div arguments must have rows summing to 1")
    log_t = _log_clamped(target_prob)
    log_p = _log_clamped(pred_prob)
    rows = T.sum_(T.mul(target_prob, T.sub(log_t, log_p)), axis=-1)
    return T.mean(rows)


def _log_clamped(p: Tensor) -> Tensor:
    # elementwise log of probabilities floored at 1e-12
    data = np.log(np.maximum(p.data, PROB_FLOOR))
    mask = p.data >= PROB_FLOOR
    safe = np.maximum(p.data, PROB_FLOOR)
    return T._make("log", data, (p,), lambda g: (g * mask / safe,))


def _log_prob(model, x, tau: float = 1.0, detach: bool = False) -> Tensor:
    logits = model(x)
    if detach:
        logits = logits.detach()
    return T.log_softmax(logits, tau)


def inner_max_loss(reference, student, x_nat, x_pert) -> Tensor:
    """KL(P(x_nat) || S(x_pert)) at temperature 1; the reference side is a constant."""
    target = _log_prob(reference, x_nat, detach=True)
    return kl_from_log(target, _log_prob(student, x_pert))


def peer_loss(spec: LossSpec, y, peer, student, x_adv, *, _peer_logits=None, _student_logits=None) -> Tensor:
    """gamma1 * CE(y, P(x_adv)) + gamma2 * tau^2 * KL(S^tau(x_adv) || P^tau(x_adv)).

    The student prediction is a constant target; only the peer receives gradient.
    """
    p_logits = peer(x_adv) if _peer_logits is None else _peer_logits
    s_logits = (student(x_adv) if _student_logits is None else _student_logits).detach()
    loss = T.scale(cross_entropy(y, p_logits), spec.gamma1)
    if spec.gamma2 != 0:
        tau = spec.tau_peer
        kl = kl_from_log(T.log_softmax(s_logits, tau), T.log_softmax(p_logits, tau))
        loss = T.add(loss, T.scale(kl, spec.gamma2 * tau * tau))
    return loss


def student_loss(spec: LossSpec, y, peer, student, x_nat, x_adv, *, _peer_logits=None,
                 _student_logits=None) -> Tensor:
    """Student objective on the shared adversarial batch.

    lambda1 * CE(y, S(x_adv)) + lambda2 * tau^2 * KL(P^tau(x_adv) || S^tau(x_adv))
    + lambda3 * tau^2 * KL(S^tau(x_nat) || S^tau(x_adv)). The peer term is a
    constant soft target; the consistency term differentiates through both
    arguments unless ``spec.detach_clean_branch`` is set.
    """
    tau = spec.tau_student
    s_adv = student(x_adv) if _student_logits is None else _student_logits
    loss = T.scale(cross_entropy(y, s_adv), spec.lambda1)
    if spec.lambda2 != 0:
        p_adv = (peer(x_adv) if _peer_logits is None else _peer_logits).detach()
        kl = kl_from_log(T.log_softmax(p_adv, tau), T.log_softmax(s_adv, tau))
        loss = T.add(loss, T.scale(kl, spec.lambda2 * tau * tau))
    if spec.lambda3 != 0:
        s_nat = student(x_nat)
        if spec.detach_clean_branch:
            s_nat = s_nat.detach()
        kl = kl_from_log(T.log_softmax(s_nat, tau), T.log_softmax(s_adv, tau))
        loss = T.add(loss, T.scale(kl, spec.lambda3 * tau * tau))
    return loss


def combined_loss(spec: LossSpec, y, peer, student, x_nat, x_adv, return_parts: bool = False):
    """peer_loss + student_loss sharing one forward pass of each network on x_adv.

    With ``return_parts`` the tuple ``(total, peer_part, student_part)`` is returned.
    """
    p_logits = peer(x_adv)
    s_logits = student(x_adv)
    lp = peer_loss(spec, y, peer, student, x_adv, _peer_logits=p_logits, _student_logits=s_logits)
    ls = student_loss(spec, y, peer, student, x_nat, x_adv, _peer_logits=p_logits, _student_logits=s_logits)
    total = T.add(lp, ls)
    return (total, lp, ls) if return_parts else total


def trades_objective(model, y, x_nat, x_adv, beta: float = 6.0) -> Tensor:
    """CE(y, f(x_nat)) + beta * KL(f(x_nat) || f(x_adv))."""
    if beta < 0:
        raise ParameterError("beta must be non-negative")
    nat = model(x_nat)
    loss = cross_entropy(y, nat)
    if beta != 0:
        kl = kl_from_log(T.log_softmax(nat), T.log_softmax(model(x_adv)))
        loss = T.add(loss, T.scale(kl, beta))
    return loss


def distillation_loss(spec: LossSpec, y, teacher, student, x_nat, x_adv) -> Tensor:
    """Student objective with a frozen teacher standing in for the peer."""
    return student_loss(spec, y, teacher.frozen(), student, x_nat, x_adv)
