"""Run configuration: UTF-8 ``key = value`` lines with dotted keys.

Example::

    # desk PeerAiD run
    seed = 0
    method = peeraid
    data.kind = gauss-blobs
    data.dim = 96
    attack.gap_fraction = 0.25
    train.epochs = 100

Blank lines and ``#`` comments are ignored. Every key must be in
:data:`SCHEMA`; values are parsed by the key's type. Keys of type ``file``
name existing files, resolved relative to the config file's directory.
Serialisation writes only the keys that were set, in schema order, so
``parse(serialize(cfg)) == cfg``.
"""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

from .attacks import AttackConfig
from .evaluation import BatteryThresholds
from .losses import LossSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _show(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default); "file" values are paths checked at parse time
_ATTACK_KEYS = {
    "epsilon": (_float, None),
    "step_size": (_float, None),
    "steps": (int, None),
    "random_start": (_bool, None),
    "objective": (str, None),
}

SCHEMA: dict = {
    "seed": (int, 0),
    "method": (str, "peeraid"),
    "out": (str, "runs/default"),
    "data.path": ("file", None),
    "data.test_path": ("file", None),
    "data.kind": (str, "gauss-blobs"),
    "data.classes": (int, 3),
    "data.n": (int, 3000),
    "data.test_n": (int, 1000),
    "data.noise": (_float, 0.08),
    "data.dim": (int, 2),
    "data.feature_shift": (_float, 0.0),
    "data.feature_noise": (_float, None),
    "data.seed": (int, None),
    "model.student": (str, "mlp-s"),
    "model.peer": (str, "mlp-p"),
    "model.teacher": ("file", None),
    "train.epochs": (int, 100),
    "train.batch_size": (int, 128),
    "train.lr_initial": (_float, 0.1),
    "train.lr_decay_epochs": (_ints, (50, 80)),
    "train.lr_decay_factor": (_float, 0.1),
    "train.momentum": (_float, 0.9),
    "train.weight_decay": (_float, 2e-4),
    "train.trades_beta": (_float, 6.0),
    "train.swa_enabled": (_bool, False),
    "train.swa_start_epoch": (int, None),
    "train.val_fraction": (_float, 0.1),
    "train.validate_on_test": (_bool, False),
    "train.inner_objective": (str, None),
    "train.eps_warmup_epochs": (int, 0),
    "train.track_peer": (_bool, True),
    "train.track_test": (_bool, False),
    "loss.gamma1": (_float, 1.0),
    "loss.gamma2": (_float, 0.1),
    "loss.lambda1": (_float, 1.0),
    "loss.lambda2": (_float, 0.0),
    "loss.lambda3": (_float, 1.0),
    "loss.tau_peer": (_float, 1.0),
    "loss.tau_student": (_float, 5.0),
    "loss.detach_clean_branch": (_bool, False),
    # budget as a fraction of the training set's class gap; overrides both epsilons
    "attack.gap_fraction": (_float, None),
    # step size as a fraction of epsilon; overrides both step sizes
    "attack.step_fraction": (_float, None),
    **{f"attack.train.{k}": v for k, v in _ATTACK_KEYS.items()},
    **{f"attack.eval.{k}": v for k, v in _ATTACK_KEYS.items()},
    "battery.max_short_long_gap": (_float, 0.03),
    "battery.max_unbounded_acc": (_float, 0.01),
    "battery.long_steps": (int, 200),
    "battery.unbounded_steps": (int, 200),
}


class RunConfig:
    """Parsed configuration: the explicitly set keys plus schema defaults."""

    def __init__(self, values: dict | None = None, base_dir: str | Path = "."):
        self.base_dir = Path(base_dir)
        self.values: dict = {}
        for key, value in (values or {}).items():
            self.set(key, value)

    # -- access

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        return self.values.get(key, SCHEMA[key][1])

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        if isinstance(value, str):
            value = self._parse_value(key, value)
        self.values[key] = value

    def _parse_value(self, key: str, text: str):
        kind = SCHEMA[key][0]
        if kind == "file":
            path = Path(text)
            if not path.is_absolute():
                path = self.base_dir / path
            if not path.is_file():
                raise ConfigError(f"{key}: file {str(path)!r} does not exist")
            return str(path)
        try:
            return kind(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None

    # -- text form

    @classmethod
    def parse(cls, text: str, base_dir: str | Path = ".") -> "RunConfig":
        cfg = cls(base_dir=base_dir)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in cfg.values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), base_dir=path.parent)

    def serialize(self) -> str:
        return "".join(f"{k} = {_show(self.values[k])}\n" for k in SCHEMA if k in self.values)

    def save(self, path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    # -- typed views

    def loss_spec(self) -> LossSpec:
        return LossSpec(**{k: self[f"loss.{k}"] for k in
                           ("gamma1", "gamma2", "lambda1", "lambda2", "lambda3", "tau_peer", "tau_student",
                            "detach_clean_branch")})

    def attack_config(self, which: str, class_gap: float | None = None) -> AttackConfig:
        """Training (``which="train"``) or evaluation attack settings."""
        base = AttackConfig(random_start=True) if which == "train" else AttackConfig(steps=10)
        fields = {k: self[f"attack.{which}.{k}"] for k in _ATTACK_KEYS}
        cfg = replace(base, **{k: v for k, v in fields.items() if v is not None})
        if self["attack.gap_fraction"] is not None:
            if class_gap is None:
                raise ConfigError("attack.gap_fraction needs the training set's class gap")
            cfg = replace(cfg, epsilon=self["attack.gap_fraction"] * class_gap)
        if self["attack.step_fraction"] is not None:
            cfg = replace(cfg, step_size=self["attack.step_fraction"] * cfg.epsilon)
        return cfg

    def battery_thresholds(self) -> BatteryThresholds:
        return BatteryThresholds(max_short_long_gap=self["battery.max_short_long_gap"],
                                 max_unbounded_acc=self["battery.max_unbounded_acc"],
                                 long_steps=self["battery.long_steps"],
                                 unbounded_steps=self["battery.unbounded_steps"])

    def train_config(self, class_gap: float | None = None) -> TrainConfig:
        t = {k.split(".", 1)[1]: self[k] for k in SCHEMA if k.startswith("train.")}
        return TrainConfig(method=self["method"], seed=self["seed"], loss_spec=self.loss_spec(),
                           attack=self.attack_config("train", class_gap),
                           eval_attack=self.attack_config("eval", class_gap), **t)

    def resolved(self, class_gap: float | None) -> "RunConfig":
        """Copy with the gap-relative budgets replaced by concrete values."""
        out = RunConfig(dict(self.values), self.base_dir)
        for which in ("train", "eval"):
            a = self.attack_config(which, class_gap)
            out.values[f"attack.{which}.epsilon"] = a.epsilon
            out.values[f"attack.{which}.step_size"] = a.step_size
        out.values.pop("attack.gap_fraction", None)
        out.values.pop("attack.step_fraction", None)
        return out
