"""Command-line entry point: ``python -m peerlab <command> ...``.

Commands: ``gen-data``, ``train``, ``attack``, ``eval``, ``cross-rob``,
``battery`` and ``report``. Exit status is 0 on success, 1 on a usage
error and 2 on a runtime failure. Files are only written inside the output
directory, which is guarded by a lock file while a command runs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .attacks import run_attack
from .config import ConfigError, RunConfig
from .data import Dataset, class_gap, gen_synthetic, load_dataset, save_dataset, save_tensor
from .metrics import MetricsWriter, read_metrics
from .nn import Model, infer_spec, load_checkpoint, preset, save_checkpoint
from .train import train

logger = logging.getLogger("peerlab")

LOCK_NAME = ".peerlab.lock"
METRICS_NAME = "metrics.jsonl"
ATTACKS = ("pgd", "fgsm", "mi-fgsm", "cw-l2", "unbounded")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; this CLI reserves 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peerlab", description="Adversarial peer-tutoring laboratory.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        if "model" in flags:
            p.add_argument("--model", action="append", help="checkpoint path (repeatable where noted)")
        if "data" in flags:
            p.add_argument("--data", help="PAID dataset file")
        return p

    add("gen-data", "generate the synthetic train/test datasets")
    p = add("train", "train one method and write checkpoints and metrics")
    p.add_argument("--validate-on-test", action="store_true", help="select the best epoch on the test set")
    p = add("attack", "craft adversarial examples against a model", "model", "data")
    p.add_argument("--attack", choices=ATTACKS, default="pgd")
    add("eval", "clean / FGSM / PGD-20 accuracy of a model", "model", "data")
    add("cross-rob", "robustness of every model on every model's attacks", "model", "data")
    add("battery", "gradient-obfuscation checks; extra --model flags are transfer surrogates", "model", "data")
    p = add("report", "aggregate run metrics into a CSV table")
    p.add_argument("--runs", help="directory holding run output directories")
    return parser


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if getattr(args, "validate_on_test", False):
        cfg.set("train.validate_on_test", True)
    return cfg


def _out_dir(args, cfg: RunConfig | None, required: bool = True) -> Path | None:
    if args.out:
        return Path(args.out)
    if cfg is not None and "out" in cfg:
        return Path(cfg["out"])
    if required:
        raise UsageError(f"{args.command}: --out is required")
    return None


@contextmanager
def _locked(out: Path | None):
    if out is None:
        yield
        return
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"output directory {out} is locked by another run ({lock})") from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def synthetic_splits(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn from the same class layout with different samples."""
    seed = cfg["data.seed"] if cfg["data.seed"] is not None else cfg["seed"]
    common = dict(kind=cfg["data.kind"], classes=cfg["data.classes"], noise=cfg["data.noise"],
                  dim=cfg["data.dim"], feature_shift=cfg["data.feature_shift"],
                  feature_noise=cfg["data.feature_noise"], pattern_seed=seed)
    train_set = gen_synthetic(n=cfg["data.n"], seed=seed, split="train", **common)
    test_set = gen_synthetic(n=cfg["data.test_n"], seed=seed + 1, split="test", **common)
    return train_set, test_set


def _datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg["data.path"] is None:
        return synthetic_splits(cfg)
    train_set = load_dataset(cfg["data.path"], "train", cfg["data.classes"])
    if cfg["data.test_path"] is not None:
        return train_set, load_dataset(cfg["data.test_path"], "test", cfg["data.classes"])
    fit, held = train_set.holdout(0.25, cfg["seed"])
    return fit, replace(held, split="test")


def _model(path) -> Model:
    params = load_checkpoint(path, requires_grad=False)
    return Model(infer_spec(params), params)


def _models(args, at_least: int) -> list:
    paths = args.model or []
    if len(paths) < at_least:
        raise UsageError(f"{args.command}: needs at least {at_least} --model")
    return [(Path(p).stem, _model(p)) for p in paths]


def _data(args) -> Dataset:
    if not args.data:
        raise UsageError(f"{args.command}: --data is required")
    return load_dataset(args.data, "test")


def run_id_for(cfg: RunConfig) -> str:
    digest = hashlib.sha256(cfg.serialize().encode()).hexdigest()[:10]
    return f"{cfg['method']}-seed{cfg['seed']}-{digest}"


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _eval_cfg(cfg: RunConfig, data: Dataset):
    gap = class_gap(data) if cfg["attack.gap_fraction"] is not None else None
    return cfg.attack_config("eval", gap)


def _table_attacks(eval_cfg) -> dict:
    return ev.standard_attacks(eval_cfg.epsilon, eval_cfg.step_size)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train_set, test_set = synthetic_splits(cfg)
    with _locked(out):
        save_dataset(out / "train.paid", train_set)
        save_dataset(out / "test.paid", test_set)
    _emit({"train": str(out / "train.paid"), "test": str(out / "test.paid"),
           "n_train": len(train_set), "n_test": len(test_set), "class_gap": class_gap(train_set)})


def cmd_train(args) -> None:
    if not args.config:
        raise UsageError("train: --config is required")
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train_set, test_set = _datasets(cfg)
    resolved = cfg.resolved(class_gap(train_set)) if cfg["attack.gap_fraction"] is not None else cfg
    tcfg = resolved.train_config()
    shape, classes = train_set.input_shape, int(cfg["data.classes"])
    student = preset(cfg["model.student"], shape, classes, "student")
    peer = preset(cfg["model.peer"], shape, classes, "peer") if tcfg.method == "peeraid" else None
    teacher = _model(cfg["model.teacher"]) if cfg["model.teacher"] else None
    with _locked(out):
        metrics_path = out / METRICS_NAME
        if metrics_path.exists():
            raise RuntimeError(f"{metrics_path} already holds a run; choose a fresh --out")
        resolved.save(out / "config.cfg")
        writer = MetricsWriter(metrics_path, run_id_for(resolved))
        result = train(tcfg, student, train_set, peer_spec=peer, teacher=teacher, test=test_set,
                       callback=lambda log: writer.write("epoch", log.as_dict()))
        save_checkpoint(out / "student.ckpt", result.params)
        save_checkpoint(out / "best.ckpt", result.best)
        if result.peer is not None:
            save_checkpoint(out / "peer.ckpt", result.peer)
            save_checkpoint(out / "peer_best.ckpt", result.peer_best)
        best = Model(student, result.best)
        rep = ev.robustness_report(best, test_set, _table_attacks(tcfg.eval_attack))
        payload = {**rep.as_dict(), "best_epoch": result.best_epoch}
        writer.write("report", payload, method=tcfg.method, checkpoint="best.ckpt")
    _emit({"run_id": writer.run_id, **payload})


def cmd_attack(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    (name, model), = _models(args, 1)[:1]
    data = _data(args)
    acfg = _eval_cfg(cfg, data)
    res = run_attack(args.attack, model, data.inputs, data.labels, acfg)
    acc = float(np.mean(~res.success_mask))
    with _locked(out):
        save_tensor(out / f"adv_{args.attack}.pait", res.x_adv)
        MetricsWriter(out / METRICS_NAME, f"attack-{name}").write(
            "report", {"acc": acc, "n": len(data), "epsilon": acfg.epsilon}, attack=args.attack, model=name)
    _emit({"model": name, "attack": args.attack, "acc": acc, "n": len(data)})


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg, required=False)
    (name, model), = _models(args, 1)[:1]
    data = _data(args)
    rep = ev.robustness_report(model, data, _table_attacks(_eval_cfg(cfg, data)))
    if out is not None:
        with _locked(out):
            MetricsWriter(out / METRICS_NAME, f"eval-{name}").write("report", rep.as_dict(), model=name)
    _emit({"model": name, **rep.as_dict()})


def cmd_cross_rob(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg, required=False)
    models = _models(args, 2)
    data = _data(args)
    acfg = replace(_eval_cfg(cfg, data), steps=20, random_start=False)
    names = [n if not any(n == m for m, _ in models[:i]) else f"{n}{i}" for i, (n, _) in enumerate(models)]
    cross = ev.cross_robustness(dict(zip(names, (m for _, m in models))), data, acfg)
    if out is not None:
        with _locked(out):
            MetricsWriter(out / METRICS_NAME, "cross-rob").write("report", cross.as_dict())
    _emit(cross.as_dict())


def cmd_battery(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg, required=False)
    models = _models(args, 1)
    data = _data(args)
    (name, target), surrogates = models[0], dict(models[1:])
    report = ev.obfuscation_battery(target, data, _eval_cfg(cfg, data), cfg.battery_thresholds(),
                                    surrogates or None)
    if out is not None:
        with _locked(out):
            MetricsWriter(out / METRICS_NAME, f"battery-{name}").write("battery", report.payload(), model=name)
    _emit({"model": name, "passed": report.passed, "checks": [c.as_dict() for c in report.checks]})


REPORT_COLUMNS = ("clean", "fgsm", "pgd20")


def collect_reports(runs: Path) -> dict:
    """Final training report of every run under ``runs``, grouped by method."""
    by_method: dict = {}
    for path in sorted(runs.rglob(METRICS_NAME)):
        reports = [r for r in read_metrics(path) if r.kind == "report" and "method" in r.tags]
        if reports:
            by_method.setdefault(reports[-1].tags["method"], []).append(reports[-1].payload)
    return by_method


def report_csv(by_method: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("method", "runs", *REPORT_COLUMNS))
    for method in sorted(by_method):
        rows = by_method[method]
        means = [float(np.mean([r[c] for r in rows])) for c in REPORT_COLUMNS]
        writer.writerow((method, len(rows), *(f"{m:.4f}" for m in means)))
    return buf.getvalue()


def cmd_report(args) -> None:
    if not args.runs:
        raise UsageError("report: --runs is required")
    runs = Path(args.runs)
    if not runs.is_dir():
        raise RuntimeError(f"runs directory {runs} does not exist")
    text = report_csv(collect_reports(runs))
    out = Path(args.out) if args.out else None
    if out is not None:
        with _locked(out):
            (out / "report.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "cross-rob": cmd_cross_rob,
    "battery": cmd_battery,
    "report": cmd_report,
}


def main(argv=None) -> int:
    """Parse ``argv`` and run one command; returns the exit status."""
    logging.basicConfig(level=os.environ.get("PEERLAB_LOG", "WARNING"), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = argparse.Namespace(command="")
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help exits 0 through argparse
        return int(exc.code or 0)
    except (ConfigError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"peerlab {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


cli_dispatch = main


if __name__ == "__main__":
    sys.exit(main())
