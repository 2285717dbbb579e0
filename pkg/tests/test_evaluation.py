"""Measurement battery: accuracy, cross robustness, cosine tables, obfuscation
checks, transfer, robust overfitting and saliency."""

import math

import numpy as np
import pytest

from peerlab.attacks import AttackConfig, pgd
from peerlab.data import Dataset, class_gap, gen_synthetic
from peerlab.evaluation import (BatteryThresholds, CrossRobustness, EvaluationError, RobustnessReport,
                                accuracy, cross_robustness, judge_battery, loss_grid, obfuscation_battery,
                                penultimate_cosine, robust_accuracy, robust_overfit_gap, robustness_report,
                                saliency_map, standard_attacks, transfer_attack_eval)
from peerlab.nn import Dense, Flatten, Model, ModelSpec, Params, preset
from peerlab.tensor import ShapeError
from peerlab.train import EpochLog, TrainConfig, train_natural

from conftest import make_model


def linear_model(w, b, input_shape=None):
    w = np.asarray(w, dtype=np.float64)
    if input_shape is None:
        spec = ModelSpec((w.shape[0],), (Dense(*w.shape),), w.shape[1])
        names = ("layer0.weight", "layer0.bias")
    else:
        spec = ModelSpec(input_shape, (Flatten(), Dense(*w.shape)), w.shape[1])
        names = ("layer1.weight", "layer1.bias")
    return Model(spec, Params.from_arrays({names[0]: w, names[1]: np.asarray(b, dtype=np.float64)}))


@pytest.fixture(scope="module")
def trained():
    data = gen_synthetic("gauss-blobs", 3, 900, 0.08, seed=0)
    test = gen_synthetic("gauss-blobs", 3, 300, 0.08, seed=1)
    spec = preset("mlp-s", (2,), 3)
    cfg = TrainConfig(method="natural", epochs=15, lr_initial=0.05, lr_decay_epochs=(10,))
    return Model(spec, train_natural(spec, data, cfg).params), test


# ---------------------------------------------------------------- accuracy


def test_constant_model_on_single_class_data():
    m = linear_model(np.zeros((2, 3)), [0.0, 5.0, 0.0])
    assert accuracy(m, (np.random.default_rng(0).uniform(size=(20, 2)), np.ones(20, int))) == 1.0


def test_random_labels_give_chance_accuracy():
    rng = np.random.default_rng(0)
    m = make_model("mlp-s", (4,), classes=2)
    x, y = rng.uniform(size=(10_000, 4)), rng.integers(0, 2, size=10_000)
    assert abs(accuracy(m, (x, y)) - 0.5) <= 0.02


def test_accuracy_matches_manual_tally():
    w = np.array([[1.0, -1.0], [-1.0, 1.0]])
    m = linear_model(w, [0.0, 0.0])
    x = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.5], [0.3, 0.4], [0.5, 0.45],
                  [0.1, 0.0], [0.7, 0.9], [0.4, 0.2], [0.0, 1.0], [0.55, 0.6]])
    y = np.array([0, 1, 1, 1, 0, 0, 0, 0, 1, 1])
    pred = [0 if a > b else 1 for a, b in x]
    assert accuracy(m, (x, y)) == sum(int(p == t) for p, t in zip(pred, y)) / 10
    assert accuracy(m, Dataset(x, y)) == accuracy(m, (x, y))


def test_empty_data_is_rejected():
    with pytest.raises(EvaluationError):
        accuracy(make_model("mlp-s", (2,)), (np.zeros((0, 2)), np.zeros(0, int)))


def test_zero_budget_equals_clean(trained):
    model, test = trained
    assert robust_accuracy(model, test, AttackConfig(epsilon=0.0, steps=20)) == accuracy(model, test)


def test_natural_model_collapses_under_a_large_budget(trained):
    # desk budget comparable to a large fraction of the class gap (about 0.44 here)
    model, test = trained
    eps = 0.8 * class_gap(test)
    assert robust_accuracy(model, test, AttackConfig(epsilon=eps, step_size=eps / 8, steps=20)) < 0.02


def test_robust_accuracy_is_monotone_in_budget(trained):
    model, test = trained
    accs = [robust_accuracy(model, test, AttackConfig(epsilon=e, step_size=max(e / 4, 1e-3), steps=10))
            for e in (0.0, 0.02, 0.04, 0.08)]
    assert all(b <= a + 0.01 for a, b in zip(accs, accs[1:]))


def test_robustness_report(trained):
    model, test = trained
    rep = robustness_report(model, test, standard_attacks(0.05, 0.0125))
    assert set(rep.accuracies) == {"fgsm", "pgd20"} and rep.n == len(test)
    assert rep.configs["pgd20"]["steps"] == 20
    assert rep.as_dict()["clean"] == accuracy(model, test)
    with pytest.raises(EvaluationError):
        RobustnessReport(1.2, {}, 10)
    with pytest.raises(EvaluationError):
        RobustnessReport(0.5, {"pgd": 0.3}, 0)


# ---------------------------------------------------------------- cross robustness


def test_cross_robustness_single_model_matches_robust_accuracy(trained):
    model, test = trained
    cfg = AttackConfig(epsilon=0.05, step_size=0.0125, steps=10)
    cr = cross_robustness({"s": model}, test, cfg)
    assert cr.matrix.shape == (1, 1)
    assert cr.rob("s", "s") == robust_accuracy(model, test, cfg)


def test_cross_robustness_matrix_semantics_and_determinism(trained):
    model, test = trained
    other = make_model("mlp-p", (2,), seed=4, role="peer")
    cfg = AttackConfig(epsilon=0.05, step_size=0.0125, steps=10)
    cr = cross_robustness({"s": model, "p": other}, test, cfg)
    x_s = pgd(model, test.inputs, test.labels, cfg).x_adv
    assert cr.rob("p", "s") == np.mean(other.predict(x_s) == test.labels)
    again = cross_robustness({"s": model, "p": other}, test, cfg)
    assert np.array_equal(cr.matrix, again.matrix) and cr.digests == again.digests
    d = cr.as_dict()
    assert d["rob_p_on_s"] == cr.rob("p", "s") and d["clean_s"] == accuracy(model, test)
    with pytest.raises(ShapeError):
        cross_robustness({"s": model, "q": make_model("mlp-s", (3,))}, test, cfg)
    with pytest.raises(ShapeError):
        CrossRobustness(["a", "b"], np.zeros((1, 1)), {})


# ---------------------------------------------------------------- cosine


def test_cosine_of_identical_inputs_is_one(trained):
    model, test = trained
    table = penultimate_cosine(model, test.inputs, {"same": test.inputs.copy()})
    assert table.values["x|same"] == pytest.approx(1.0, abs=1e-9)
    assert table.counts["x|same"] + table.skipped["x|same"] == len(test)


def test_cosine_of_orthogonal_features_and_zero_norm_skips():
    # identity hidden layer: the features are relu(x) itself
    from peerlab.nn import ReLU
    spec = ModelSpec((2,), (Dense(2, 2), ReLU(), Dense(2, 2)), 2)
    p = Params.from_arrays({"layer0.weight": np.eye(2), "layer0.bias": np.zeros(2),
                            "layer2.weight": np.eye(2), "layer2.bias": np.zeros(2)})
    m = Model(spec, p)
    x = np.array([[1.0, 0.0], [0.5, 0.0], [0.0, 0.0]])
    b = np.array([[0.0, 1.0], [0.0, 0.3], [0.0, 1.0]])
    table = penultimate_cosine(m, x, {"b": b})
    assert table.values["x|b"] == pytest.approx(0.0, abs=1e-12)
    assert table.skipped["x|b"] == 1 and table.counts["x|b"] == 2
    with pytest.raises(ShapeError):
        penultimate_cosine(m, x, {"bad": b[:2]})


def test_cosine_custom_pairs(trained):
    model, test = trained
    x = test.inputs[:50]
    noisy = np.clip(x + 0.01, 0, 1)
    table = penultimate_cosine(model, x, {"a": noisy, "b": noisy}, pairs=[("a", "b"), ("x", "a")])
    assert set(table.values) == {"a|b", "x|a"}
    assert table.values["a|b"] == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- battery


def test_battery_paper_fixtures():
    rep = judge_battery(short=0.3066, long=0.2936, unbounded=0.0, fgsm_acc=0.6128, pgd_acc=0.5436)
    gap = rep.check("pgd_short_vs_long")
    assert gap.values["gap"] == pytest.approx(0.0130, abs=1e-12) and gap.passed
    assert rep.check("unbounded").passed
    assert rep.check("fgsm_vs_pgd").passed
    assert rep.check("transfer_vs_whitebox").passed is None
    assert rep.passed


def test_battery_failures_and_configurable_thresholds():
    rep = judge_battery(0.50, 0.40, 0.20, 0.30, 0.35, transfer={"sur": 0.2})
    assert not any(c.passed for c in rep.checks)
    assert not rep.passed
    loose = BatteryThresholds(max_short_long_gap=0.2, max_unbounded_acc=0.25)
    rep = judge_battery(0.50, 0.40, 0.20, 0.30, 0.35, thresholds=loose)
    assert rep.check("pgd_short_vs_long").passed and rep.check("unbounded").passed
    payload = rep.payload()
    assert payload["pgd_short_vs_long.gap"] == pytest.approx(0.1) and payload["unbounded.passed"] is True


def test_battery_on_a_model(trained):
    model, test = trained
    cfg = AttackConfig(epsilon=0.05, step_size=0.0125)
    th = BatteryThresholds(long_steps=40, unbounded_steps=60)
    sur = make_model("mlp-p", (2,), seed=3, role="peer")
    rep = obfuscation_battery(model, test, cfg, th, surrogates={"sur": sur})
    assert [c.name for c in rep.checks] == ["pgd_short_vs_long", "unbounded", "fgsm_vs_pgd",
                                            "transfer_vs_whitebox"]
    assert rep.check("unbounded").values["acc"] <= 0.01
    assert rep.check("transfer_vs_whitebox").passed is not None


def test_transfer_from_self_equals_whitebox(trained):
    model, test = trained
    cfgs = {"pgd10": AttackConfig(epsilon=0.05, step_size=0.0125, steps=10)}
    out = transfer_attack_eval(model, {"self": model}, test, cfgs)
    assert out[("self", "pgd10")] == robust_accuracy(model, test, cfgs["pgd10"])
    assert out == transfer_attack_eval(model, {"self": model}, test, cfgs)


# ---------------------------------------------------------------- robust overfitting


def test_overfit_gap_paper_fixture():
    logs = [{"robust_acc": 21.84}, {"robust_acc": 18.61}]
    gap = robust_overfit_gap(logs)["robust_acc"]
    assert gap["best"] == 21.84 and gap["final"] == 18.61
    assert gap["diff"] == 3.23


def test_overfit_gap_selects_on_validation():
    logs = [EpochLog(e, 0.1, {}, 0.9, r, {"test_robust_acc": t})
            for e, (r, t) in enumerate([(0.3, 0.25), (0.5, 0.41), (0.5, 0.47), (0.4, 0.36)])]
    out = robust_overfit_gap(logs, metrics=["robust_acc", "test_robust_acc"])
    assert out["test_robust_acc"]["best_epoch"] == 1
    assert out["test_robust_acc"]["diff"] == pytest.approx(0.05, abs=1e-12)


def test_overfit_gap_negative_and_constant():
    rising = [{"robust_acc": v, "clean": c} for v, c in [(0.2, 0.80), (0.2, 0.85), (0.2, 0.87)]]
    out = robust_overfit_gap(rising, metrics=["clean"])
    assert out["clean"]["diff"] < 0
    flat = [{"robust_acc": 0.4}] * 5
    assert robust_overfit_gap(flat)["robust_acc"]["diff"] == 0
    with pytest.raises(EvaluationError):
        robust_overfit_gap([])
    with pytest.raises(EvaluationError):
        robust_overfit_gap(flat, metrics=["pgd20"])


# ---------------------------------------------------------------- saliency and loss grid


def test_saliency_is_normalised(trained):
    model, test = trained
    res = saliency_map(make_model("cnn-t", (3, 8, 8)), np.random.default_rng(0).uniform(size=(4, 3, 8, 8)),
                       [0, 1, 2, 0])
    assert res.maps.shape == (4, 8, 8)
    for m, flag in zip(res.maps, res.degenerate):
        if not flag:
            assert m.min() == 0.0 and m.max() == 1.0


def test_saliency_of_linear_model_follows_weights():
    rng = np.random.default_rng(1)
    shape = (2, 3, 3)
    # uniform entries never reach the 3-sigma clip, so the map is a pure rescaling
    w = rng.uniform(-1, 1, size=(18, 2))
    m = linear_model(w, [0.0, 0.0], input_shape=shape)
    x = rng.uniform(size=(1,) + shape)
    y = [0]
    res = saliency_map(m, x, y)
    d = np.abs((w[:, 1] - w[:, 0]).reshape(shape)).sum(axis=0)
    expected = (d - d.min()) / (d.max() - d.min())
    assert np.allclose(res.maps[0], expected, atol=1e-12) and not res.degenerate[0]


def test_saliency_flags_constant_gradients():
    m = linear_model(np.zeros((4, 2)), [0.0, 0.0])
    res = saliency_map(m, np.full((2, 4), 0.5), [0, 1])
    assert res.degenerate.all() and not res.maps.any()


def test_loss_grid_centre_is_the_model_loss(trained):
    from peerlab.losses import cross_entropy
    model, test = trained
    grid = loss_grid(model, test, span=0.5, points=5, seed=0)
    assert grid.shape == (5, 5)
    assert grid[2, 2] == pytest.approx(cross_entropy(test.labels, model(test.inputs)).item(), abs=1e-12)
    assert np.array_equal(grid, loss_grid(model, test, span=0.5, points=5, seed=0))
    assert math.isfinite(grid.max())
