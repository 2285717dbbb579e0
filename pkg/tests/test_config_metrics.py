import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peerlab.attacks import AttackConfig
from peerlab.config import SCHEMA, ConfigError, RunConfig, _bool, _float, _ints
from peerlab.losses import LossSpec
from peerlab.metrics import MetricsError, MetricsRecord, MetricsWriter, read_metrics

EXAMPLE = """\
# desk PeerAiD run
seed = 3
method = peeraid
data.dim = 96        # extra non-robust axes
data.feature_shift = 0.04
attack.gap_fraction = 0.25
attack.step_fraction = 0.25
train.lr_decay_epochs = 50, 80
train.track_peer = false
loss.tau_student = 5.0
"""


def test_parse_example():
    cfg = RunConfig.parse(EXAMPLE)
    assert cfg["seed"] == 3 and cfg["data.dim"] == 96
    assert cfg["train.lr_decay_epochs"] == (50, 80)
    assert cfg["train.track_peer"] is False
    assert cfg["data.n"] == 3000  # schema default
    assert "data.n" not in cfg


def test_round_trip_of_example():
    cfg = RunConfig.parse(EXAMPLE)
    again = RunConfig.parse(cfg.serialize())
    assert again == cfg and again.serialize() == cfg.serialize()


def _value_strategy(key):
    parser = SCHEMA[key][0]
    if parser is int:
        return st.integers(-10**6, 10**6)
    if parser is _float:
        return st.floats(allow_nan=False, allow_infinity=False, width=64)
    if parser is _bool:
        return st.booleans()
    if parser is _ints:
        return st.lists(st.integers(0, 500), max_size=4).map(tuple)
    return st.text("abcdefghijklmnopqrstuvwxyz-_/.0123456789", min_size=1, max_size=12)


@st.composite
def configs(draw):
    keys = draw(st.lists(st.sampled_from([k for k in SCHEMA if SCHEMA[k][0] != "file"]), unique=True))
    return {k: draw(_value_strategy(k)) for k in keys}


@settings(max_examples=150, deadline=None)
@given(configs())
def test_parse_serialize_parse_is_identity(values):
    cfg = RunConfig(values)
    text = cfg.serialize()
    back = RunConfig.parse(text)
    assert set(back.values) == set(values)
    assert back == cfg
    assert RunConfig.parse(back.serialize()).serialize() == text


def test_rejections(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.parse("train.optimizer = adam\n")
    with pytest.raises(ConfigError, match="duplicate"):
        RunConfig.parse("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig.parse("data.n = many\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig.parse("data.noise = nan\n")
    with pytest.raises(ConfigError, match="expected"):
        RunConfig.parse("seed 1\n")
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig.parse("data.path = missing.paid\n", base_dir=tmp_path)


def test_file_keys_resolve_relative_to_the_config(tmp_path):
    (tmp_path / "d.paid").write_bytes(b"")
    (tmp_path / "run.cfg").write_text("data.path = d.paid\n")
    cfg = RunConfig.load(tmp_path / "run.cfg")
    assert cfg["data.path"] == str(tmp_path / "d.paid")


def test_typed_views():
    cfg = RunConfig.parse(EXAMPLE)
    assert cfg.loss_spec() == LossSpec(tau_student=5.0)
    train_attack = cfg.attack_config("train", class_gap=0.4)
    assert train_attack.epsilon == pytest.approx(0.1) and train_attack.step_size == pytest.approx(0.025)
    assert train_attack.random_start
    assert not cfg.attack_config("eval", class_gap=0.4).random_start
    with pytest.raises(ConfigError):
        cfg.attack_config("train")
    tc = RunConfig.parse(EXAMPLE).resolved(0.4).train_config()
    assert tc.seed == 3 and tc.lr_decay_epochs == (50, 80) and tc.eval_attack.epsilon == pytest.approx(0.1)
    assert RunConfig().battery_thresholds().max_unbounded_acc == 0.01


def test_resolved_drops_fractions():
    res = RunConfig.parse(EXAMPLE).resolved(0.4)
    assert "attack.gap_fraction" not in res and res["attack.train.epsilon"] == pytest.approx(0.1)
    assert RunConfig.parse(res.serialize()) == res
    plain = RunConfig({"attack.eval.epsilon": 0.2}).attack_config("eval")
    assert plain == AttackConfig(epsilon=0.2, steps=10)


# ---------------------------------------------------------------- metrics


def test_record_json_round_trip():
    rec = MetricsRecord("run", 4, "epoch", {"clean_acc": 0.5, "epoch": 3, "ok": True, "none": None},
                        {"method": "peeraid"})
    line = rec.to_json()
    assert json.loads(line)["payload"]["epoch"] == 3
    assert MetricsRecord.from_json(line) == rec


def test_record_validation():
    with pytest.raises(MetricsError):
        MetricsRecord("r", 0, "debug", {})
    with pytest.raises(MetricsError):
        MetricsRecord("r", 0, "epoch", {"x": "text"})
    with pytest.raises(MetricsError):
        MetricsRecord("r", 0, "epoch", {"x": math.inf})
    with pytest.raises(MetricsError):
        MetricsRecord.from_json("{not json")


def test_writer_appends_with_a_logical_clock(tmp_path):
    path = tmp_path / "m.jsonl"
    w = MetricsWriter(path, "a")
    w.write("epoch", {"epoch": 0})
    w.write("epoch", {"epoch": 1})
    again = MetricsWriter(path, "a")
    again.write("report", {"clean": 1.0}, method="natural")
    records = read_metrics(path)
    assert [r.timestamp for r in records] == [0, 1, 2]
    assert [r.kind for r in records] == ["epoch", "epoch", "report"]
    for line in path.read_text().splitlines():
        json.loads(line)
