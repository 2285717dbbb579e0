"""Training loops: SGD with momentum, step-decay schedule, SWA and five methods.

Methods: ``natural``, ``pgd-at``, ``trades``, ``fixed-teacher-ad`` and
``peeraid``. Every method shares the epoch machinery: shuffled mini-batches,
an epoch-end PGD-10 validation of the student, optional weight averaging,
and best-checkpoint tracking on the validated robust accuracy.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd
from .data import Dataset
from .losses import LossSpec, combined_loss, cross_entropy, distillation_loss, trades_objective
from .nn import Model, ModelSpec, Params, init_params

logger = logging.getLogger(__name__)

METHODS = ("natural", "pgd-at", "trades", "fixed-teacher-ad", "peeraid")
LOSS_LIMIT = 1e6


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "peeraid"
    epochs: int = 100
    batch_size: int = 128
    lr_initial: float = 0.1
    lr_decay_epochs: tuple = (50, 80)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    attack: AttackConfig = AttackConfig(random_start=True)
    eval_attack: AttackConfig = AttackConfig(steps=10)
    loss_spec: LossSpec = LossSpec()
    trades_beta: float = 6.0
    swa_enabled: bool = False
    swa_start_epoch: int | None = None
    seed: int = 0
    val_fraction: float = 0.1
    validate_on_test: bool = False
    # overrides the method's inner-max objective ("ce" or "kl"); None keeps the default
    inner_objective: str | None = None
    # linear ramp of the training-attack budget over the first epochs; 0 disables
    eps_warmup_epochs: int = 0
    # extra per-epoch diagnostics for peeraid (peer robustness on student/peer attacks)
    track_peer: bool = True
    # also log clean / PGD-10 accuracy on the test set each epoch (robust-overfitting curves)
    track_test: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise TrainConfigError(f"method must be one of {METHODS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainConfigError("epochs and batch_size must be positive")
        decays = tuple(int(e) for e in self.lr_decay_epochs)
        object.__setattr__(self, "lr_decay_epochs", decays)
        if any(b <= a for a, b in zip(decays, decays[1:])) or any(e >= self.epochs or e < 0 for e in decays):
            raise TrainConfigError("lr_decay_epochs must be strictly increasing and inside [0, epochs)")
        if self.swa_enabled and self.swa_start_epoch is None:
            if not decays:
                raise TrainConfigError("swa needs swa_start_epoch or at least one decay epoch")
            object.__setattr__(self, "swa_start_epoch", decays[0])
        if not 0 < self.val_fraction < 1:
            raise TrainConfigError("val_fraction must be in (0, 1)")


@dataclass
class OptimState:
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0


@dataclass
class SWAState:
    average: "OrderedDict[str, np.ndarray] | None" = None
    count: int = 0


@dataclass
class EpochLog:
    epoch: int
    lr: float
    losses: dict
    clean_acc: float
    robust_acc: float
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"epoch": self.epoch, "lr": self.lr, "clean_acc": self.clean_acc, "robust_acc": self.robust_acc}
        out.update({f"loss_{k}": v for k, v in self.losses.items()})
        out.update(self.extra)
        return out


@dataclass
class TrainResult:
    params: Params
    best: Params
    best_epoch: int
    logs: list
    peer: Params | None = None
    peer_best: Params | None = None


def sgd_step(params: Params, grads: dict, optim: OptimState, lr: float, momentum: float,
             weight_decay: float) -> Params:
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    g' = g + wd * theta;  v <- momentum * v + g';  theta <- theta - lr * v.
    ``grads`` maps parameter names to arrays; missing names count as zero.
    """
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        elif g.shape != t.shape:
            raise T.ShapeError("sgd", g.shape, t.shape)
        g = g + weight_decay * t.data
        v = optim.velocity.get(name)
        v = g if v is None else momentum * v + g
        optim.velocity[name] = v
        t.data = t.data - lr * v
    optim.step += 1
    return params


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay; a decay epoch already uses the decayed rate."""
    passed = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.lr_initial * cfg.lr_decay_factor ** passed


def swa_update(state: SWAState, params: Params) -> SWAState:
    """Absorb one checkpoint into the running mean."""
    arrays = params.arrays()
    if state.average is None:
        state.average = OrderedDict((k, v.copy()) for k, v in arrays.items())
        state.count = 1
        return state
    if list(arrays) != list(state.average):
        raise T.ShapeError("swa", tuple(arrays), tuple(state.average))
    state.count += 1
    for k, v in arrays.items():
        if v.shape != state.average[k].shape:
            raise T.ShapeError("swa", v.shape, state.average[k].shape)
        state.average[k] = state.average[k] + (v - state.average[k]) / state.count
    return state


def swa_finalize(state: SWAState, seed: int = 0) -> Params:
    if state.count == 0:
        raise T.ContractError("swa_finalize called before any checkpoint was absorbed")
    return Params.from_arrays(OrderedDict((k, v.copy()) for k, v in state.average.items()), seed=seed)


def _named_grads(params: Params, grads: dict) -> dict:
    return {name: grads[t] for name, t in params.tensors.items() if t in grads}


def _accuracy(model: Model, x, y) -> float:
    return float(np.mean(model.predict(x) == y))


class _Loop:
    """Shared epoch/batch machinery; subclasses provide ``batch_loss``."""

    def __init__(self, student: Model, train: Dataset, val: Dataset, cfg: TrainConfig, callback=None,
                 test: Dataset | None = None):
        self.student = student
        self.train = train
        self.val = val
        self.test = test
        self.cfg = cfg
        self.callback = callback
        self.rng = np.random.default_rng(cfg.seed)
        self.optims = {"student": OptimState()}
        self.swa = SWAState()
        self.logs: list[EpochLog] = []
        self.epoch = 0

    # networks updated by this method, by name
    def networks(self) -> dict:
        return {"student": self.student}

    def attack_cfg(self, default_objective: str) -> AttackConfig:
        cfg = replace(self.cfg.attack, objective=self.cfg.inner_objective or default_objective)
        ramp = self.cfg.eps_warmup_epochs
        if ramp and self.epoch < ramp:
            frac = (self.epoch + 1) / ramp
            cfg = replace(cfg, epsilon=cfg.epsilon * frac, step_size=cfg.step_size * frac)
        return cfg

    def batch_loss(self, xb, yb):
        raise NotImplementedError

    def run(self) -> TrainResult:
        cfg = self.cfg
        n = len(self.train)
        best_acc, best_epoch, best = -1.0, -1, None
        extra_best = None
        for epoch in range(cfg.epochs):
            self.epoch = epoch
            lr = lr_at_epoch(cfg, epoch)
            order = self.rng.permutation(n)
            sums: dict[str, float] = {}
            batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb, yb = self.train.inputs[idx], self.train.labels[idx]
                total, parts = self.batch_loss(xb, yb)
                value = total.item()
                if not math.isfinite(value) or abs(value) > LOSS_LIMIT:
                    raise TrainingDiverged(f"{cfg.method}: loss {value} at epoch {epoch}, batch {batches}")
                grads = T.backward(total)
                for name, net in self.networks().items():
                    sgd_step(net.params, _named_grads(net.params, grads), self.optims[name],
                             lr, cfg.momentum, cfg.weight_decay)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                batches += 1
            swa_on = cfg.swa_enabled and epoch >= cfg.swa_start_epoch
            if swa_on:
                swa_update(self.swa, self.student.params)
                evaluated = Model(self.student.spec, swa_finalize(self.swa, self.student.params.seed))
            else:
                evaluated = self.student
            log = self.validate(epoch, lr, {k: v / batches for k, v in sums.items()}, evaluated)
            if cfg.track_test and self.test is not None:
                log.extra.update(self.test_metrics(evaluated))
            self.logs.append(log)
            if self.callback is not None:
                self.callback(log)
            if log.robust_acc > best_acc:
                best_acc, best_epoch = log.robust_acc, epoch
                best = evaluated.params.copy()
                extra_best = self.snapshot_extra()
            logger.debug("epoch %d lr %.4g clean %.4f rob %.4f", epoch, lr, log.clean_acc, log.robust_acc)
        final = swa_finalize(self.swa, self.student.params.seed) if cfg.swa_enabled and self.swa.count else \
            self.student.params.copy()
        return self.result(final, best, best_epoch, extra_best)

    def snapshot_extra(self):
        return None

    def result(self, final, best, best_epoch, extra_best) -> TrainResult:
        return TrainResult(final, best, best_epoch, self.logs)

    def test_metrics(self, model: Model) -> dict:
        x, y = self.test.inputs, self.test.labels
        adv = pgd(model, x, y, replace(self.cfg.eval_attack, random_start=False, objective="ce"))
        return {"test_clean_acc": _accuracy(model, x, y), "test_robust_acc": float(np.mean(~adv.success_mask))}

    def validate(self, epoch, lr, losses, model: Model) -> EpochLog:
        x, y = self.val.inputs, self.val.labels
        clean = _accuracy(model, x, y)
        adv = pgd(model, x, y, replace(self.cfg.eval_attack, random_start=False, objective="ce"))
        self._val_adv = adv.x_adv
        return EpochLog(epoch, lr, losses, clean, float(np.mean(~adv.success_mask)))


class _Natural(_Loop):
    def batch_loss(self, xb, yb):
        loss = cross_entropy(yb, self.student(xb))
        return loss, {"ce": loss.item()}


class _PGDAT(_Loop):
    def batch_loss(self, xb, yb):
        x_adv = pgd(self.student, xb, yb, self.attack_cfg("ce"), rng=self.rng).x_adv
        loss = cross_entropy(yb, self.student(x_adv))
        return loss, {"ce": loss.item()}


class _TRADES(_Loop):
    def batch_loss(self, xb, yb):
        x_adv = pgd(self.student, xb, yb, self.attack_cfg("kl"), rng=self.rng).x_adv
        loss = trades_objective(self.student, yb, xb, x_adv, self.cfg.trades_beta)
        return loss, {"trades": loss.item()}


class _FixedTeacher(_Loop):
    def __init__(self, student, teacher: Model, *args, **kw):
        super().__init__(student, *args, **kw)
        self.teacher = teacher.frozen()

    def batch_loss(self, xb, yb):
        x_adv = pgd(self.student, xb, yb, self.attack_cfg("kl"), reference=self.teacher, rng=self.rng).x_adv
        loss = distillation_loss(self.cfg.loss_spec, yb, self.teacher, self.student, xb, x_adv)
        return loss, {"student": loss.item()}


class _PeerAiD(_Loop):
    def __init__(self, student, peer: Model, *args, **kw):
        super().__init__(student, *args, **kw)
        self.peer = peer
        self.optims["peer"] = OptimState()
        self.batch_hook = None

    def networks(self):
        return {"student": self.student, "peer": self.peer}

    def batch_loss(self, xb, yb):
        # one adversarial batch against the student, shared by both networks
        x_adv = pgd(self.student, xb, yb, self.attack_cfg("kl"), reference=self.peer, rng=self.rng).x_adv
        if self.batch_hook is not None:
            self.batch_hook(xb, x_adv)
        total, lp, ls = combined_loss(self.cfg.loss_spec, yb, self.peer, self.student, xb, x_adv,
                                      return_parts=True)
        return total, {"peer": lp.item(), "student": ls.item()}

    def validate(self, epoch, lr, losses, model):
        log = super().validate(epoch, lr, losses, model)
        if self.cfg.track_peer:
            x, y = self.val.inputs, self.val.labels
            peer = self.peer
            ev = replace(self.cfg.eval_attack, random_start=False, objective="ce")
            log.extra.update({
                "peer_clean_acc": _accuracy(peer, x, y),
                "peer_rob_on_student_adv": _accuracy(peer, self._val_adv, y),
                "peer_rob_on_own_adv": float(np.mean(~pgd(peer, x, y, ev).success_mask)),
            })
        return log

    def snapshot_extra(self):
        return self.peer.params.copy()

    def result(self, final, best, best_epoch, extra_best):
        return TrainResult(final, best, best_epoch, self.logs, peer=self.peer.params.copy(), peer_best=extra_best)


def _splits(data: Dataset, cfg: TrainConfig, test: Dataset | None):
    if cfg.validate_on_test:
        if test is None:
            raise TrainConfigError("validate_on_test needs a test dataset")
        return data, test
    return data.holdout(cfg.val_fraction, cfg.seed)


def _student(spec_or_model, seed: int) -> Model:
    if isinstance(spec_or_model, Model):
        return spec_or_model
    return Model(spec_or_model, init_params(spec_or_model, seed))


def _check_method(cfg: TrainConfig, expected: str):
    if cfg.method != expected:
        raise TrainConfigError(f"config method is {cfg.method!r}, expected {expected!r}")


def train_natural(spec: ModelSpec, data: Dataset, cfg: TrainConfig, test=None, callback=None) -> TrainResult:
    _check_method(cfg, "natural")
    train, val = _splits(data, cfg, test)
    return _Natural(_student(spec, cfg.seed), train, val, cfg, callback, test).run()


def train_pgd_at(spec: ModelSpec, data: Dataset, cfg: TrainConfig, test=None, callback=None) -> TrainResult:
    _check_method(cfg, "pgd-at")
    train, val = _splits(data, cfg, test)
    return _PGDAT(_student(spec, cfg.seed), train, val, cfg, callback, test).run()


def train_trades(spec: ModelSpec, data: Dataset, cfg: TrainConfig, test=None, callback=None) -> TrainResult:
    _check_method(cfg, "trades")
    train, val = _splits(data, cfg, test)
    return _TRADES(_student(spec, cfg.seed), train, val, cfg, callback, test).run()


def train_fixed_teacher_ad(spec: ModelSpec, teacher: Model | None, data: Dataset, cfg: TrainConfig,
                           test=None, callback=None) -> TrainResult:
    """Distil from a frozen teacher on adversarial examples crafted against the student."""
    _check_method(cfg, "fixed-teacher-ad")
    if teacher is None:
        raise TrainConfigError("fixed-teacher-ad needs a teacher checkpoint")
    train, val = _splits(data, cfg, test)
    return _FixedTeacher(_student(spec, cfg.seed), teacher, train, val, cfg, callback, test).run()


def train_peeraid(student_spec, peer_spec, data: Dataset, cfg: TrainConfig, test=None, callback=None,
                  batch_hook=None) -> TrainResult:
    """Joint peer/student training on one shared adversarial batch per step.

    Per batch: PGD against the student maximising KL(peer(x) || student(x_adv)),
    then one SGD step on each network from peer_loss + student_loss. The peer
    is initialised from ``cfg.seed + 1``. ``batch_hook(x, x_adv)`` observes
    every shared adversarial batch.
    """
    _check_method(cfg, "peeraid")
    train, val = _splits(data, cfg, test)
    loop = _PeerAiD(_student(student_spec, cfg.seed), _student(peer_spec, cfg.seed + 1), train, val, cfg,
                    callback, test)
    loop.batch_hook = batch_hook
    return loop.run()


def train(method_cfg: TrainConfig, student_spec, data: Dataset, peer_spec=None, teacher=None, test=None,
          callback=None) -> TrainResult:
    """Dispatch on ``cfg.method``."""
    m = method_cfg.method
    if m == "natural":
        return train_natural(student_spec, data, method_cfg, test, callback)
    if m == "pgd-at":
        return train_pgd_at(student_spec, data, method_cfg, test, callback)
    if m == "trades":
        return train_trades(student_spec, data, method_cfg, test, callback)
    if m == "fixed-teacher-ad":
        return train_fixed_teacher_ad(student_spec, teacher, data, method_cfg, test, callback)
    if peer_spec is None:
        raise TrainConfigError("peeraid needs a peer spec")
    return train_peeraid(student_spec, peer_spec, data, method_cfg, test, callback)
