"""Attack family: closed-form and grid-search oracles, feasibility and neutrality."""

import math

import numpy as np
import pytest

from peerlab import tensor as T
from peerlab.attacks import (AttackConfig, AttackConfigError, cw_l2, cw_margin, fgsm, mi_fgsm, pgd, project,
                             run_attack, unbounded_pgd)
from peerlab.losses import cross_entropy
from peerlab.nn import Dense, Model, ModelSpec, Params, ReLU, mlp
from peerlab.tensor import Tensor

from conftest import make_model


def linear_model(w, b):
    w = np.asarray(w, dtype=np.float64)
    spec = ModelSpec((w.shape[0],), (Dense(*w.shape),), w.shape[1])
    return Model(spec, Params.from_arrays({"layer0.weight": w, "layer0.bias": np.asarray(b, dtype=np.float64)}))


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def snapshot(model):
    return {k: v.copy() for k, v in model.params.arrays().items()}


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(AttackConfigError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(AttackConfigError):
        AttackConfig(step_size=0.0, steps=3)
    AttackConfig(step_size=0.0, steps=0)
    with pytest.raises(AttackConfigError):
        AttackConfig(objective="hinge")
    with pytest.raises(AttackConfigError):
        AttackConfig(momentum_decay=-1.0)
    with pytest.raises(AttackConfigError):
        AttackConfig(clamp_domain=(1.0, 0.0))
    with pytest.raises(AttackConfigError):
        pgd(make_model("mlp-s", (2,)), np.zeros((1, 2)), [0], AttackConfig(steps=0, step_size=0.1))


def test_paper_evaluation_budget_is_the_default():
    cfg = AttackConfig()
    assert cfg.epsilon == 8 / 255 and cfg.step_size == 2 / 255
    assert AttackConfig(steps=20).steps == 20
    assert AttackConfig().momentum_decay == 1.0 and AttackConfig().c_balance == 0.1


def test_project_ball_then_domain():
    cfg = AttackConfig(epsilon=0.1)
    x0 = np.array([[0.05, 0.5, 0.97]])
    out = project(np.array([[-1.0, 0.9, 2.0]]), x0, cfg)
    assert np.allclose(out, [[0.0, 0.6, 1.0]])


# ---------------------------------------------------------------- FGSM


def test_fgsm_zero_budget_is_identity(rng):
    m = make_model("mlp-s", (4,))
    x = rng.uniform(size=(5, 4))
    assert np.array_equal(fgsm(m, x, np.zeros(5, int), AttackConfig(epsilon=0.0)).x_adv, x)
    assert np.array_equal(pgd(m, x, np.zeros(5, int), AttackConfig(epsilon=0.0, random_start=True)).x_adv, x)


def test_fgsm_linear_model_closed_form(rng):
    w = rng.normal(size=(6, 3))
    b = rng.normal(size=3)
    m = linear_model(w, b)
    x = rng.uniform(0.2, 0.8, size=(10, 6))
    y = rng.integers(0, 3, size=10)
    eps = 0.05
    p = softmax(x @ w + b)
    p[np.arange(10), y] -= 1.0
    grad = p @ w.T / 10
    out = fgsm(m, x, y, AttackConfig(epsilon=eps)).x_adv
    assert np.max(np.abs(out - (x + eps * np.sign(grad)))) < 1e-9


def test_fgsm_ignores_steps(rng):
    m = make_model("mlp-s", (4,))
    x = rng.uniform(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    a = fgsm(m, x, y, AttackConfig(steps=1))
    b = fgsm(m, x, y, AttackConfig(steps=40))
    assert np.array_equal(a.x_adv, b.x_adv) and len(b.loss_trace) == 1


def test_sign_of_zero_gradient_leaves_coordinate_unchanged():
    # the second input feature has zero weight, so its gradient is exactly zero
    m = linear_model([[1.0, -1.0], [0.0, 0.0]], [0.0, 0.0])
    x = np.array([[0.5, 0.5]])
    out = fgsm(m, x, [0], AttackConfig(epsilon=0.1)).x_adv
    assert out[0, 1] == 0.5 and out[0, 0] != 0.5


# ---------------------------------------------------------------- PGD


def test_pgd_matches_grid_search_on_one_dimensional_input():
    # logits [0, -|x - c|]: the label-0 cross-entropy peaks at x = c inside the ball
    c = 0.5237
    spec = mlp(1, [2], 2)
    m = Model(spec, Params.from_arrays({
        "layer0.weight": np.array([[1.0, -1.0]]), "layer0.bias": np.array([-c, c]),
        "layer2.weight": np.array([[0.0, -1.0], [0.0, -1.0]]), "layer2.bias": np.zeros(2)}))
    x0 = np.array([[0.5]])
    eps = 0.1
    res = pgd(m, x0, [0], AttackConfig(epsilon=eps, step_size=1e-3, steps=50))

    grid = np.linspace(0.5 - eps, 0.5 + eps, 20001).reshape(-1, 1)
    per_point = -np.log(softmax(m(grid).data)[:, 0])
    best = per_point.max()
    final = cross_entropy([0], m(res.x_adv)).item()
    assert abs(final - best) < 1e-3


def test_pgd_iterates_are_feasible(rng):
    m = make_model("mlp-s", (5,))
    x = rng.uniform(size=(20, 5))
    y = rng.integers(0, 3, size=20)
    cfg = AttackConfig(epsilon=0.07, step_size=0.03, steps=15, random_start=True)
    seen = []

    def hook(xa, x0):
        seen.append((np.abs(xa - x0).max(), xa.min(), xa.max()))

    res = pgd(m, x, y, cfg, rng=np.random.default_rng(0), trace_hook=hook)
    assert len(seen) == 15 and len(res.loss_trace) == 15
    assert all(d <= 0.07 + 1e-9 and lo >= 0 and hi <= 1 for d, lo, hi in seen)


def test_pgd_is_deterministic_without_random_start(rng):
    m = make_model("mlp-p", (5,))
    x = rng.uniform(size=(10, 5))
    y = rng.integers(0, 3, size=10)
    a = pgd(m, x, y, AttackConfig(steps=7))
    b = pgd(m, x, y, AttackConfig(steps=7))
    assert np.array_equal(a.x_adv, b.x_adv) and a.loss_trace == b.loss_trace


def test_random_start_is_reproducible_by_seed(rng):
    m = make_model("mlp-s", (5,))
    x = rng.uniform(size=(10, 5))
    y = rng.integers(0, 3, size=10)
    cfg = AttackConfig(steps=3, random_start=True)
    a = pgd(m, x, y, cfg, rng=np.random.default_rng(3)).x_adv
    b = pgd(m, x, y, cfg, rng=np.random.default_rng(3)).x_adv
    c = pgd(m, x, y, cfg, rng=np.random.default_rng(4)).x_adv
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_best_of_trace_never_worse_than_final(rng):
    m = make_model("mlp-s", (4,))
    x = rng.uniform(size=(30, 4))
    y = rng.integers(0, 3, size=30)
    cfg = AttackConfig(epsilon=0.2, step_size=0.15, steps=8)
    final = pgd(m, x, y, cfg).x_adv
    best = pgd(m, x, y, AttackConfig(epsilon=0.2, step_size=0.15, steps=8, best_of_trace=True)).x_adv

    def per(z):
        return -np.log(softmax(m(z).data)[np.arange(30), y])

    assert np.all(per(best) >= per(final) - 1e-12)
    assert np.abs(best - x).max() <= 0.2 + 1e-9


def test_kl_objective_uses_reference_prediction(rng):
    student = make_model("mlp-s", (4,), seed=0)
    peer = make_model("mlp-p", (4,), seed=1, role="peer")
    x = rng.uniform(size=(12, 4))
    y = rng.integers(0, 3, size=12)
    cfg = AttackConfig(steps=5, objective="kl")
    with_peer = pgd(student, x, y, cfg, reference=peer)
    self_ref = pgd(student, x, y, cfg)
    # the self-referenced KL starts at zero with zero gradient, so x stays put
    assert self_ref.loss_trace[0] == pytest.approx(0.0, abs=1e-12)
    assert with_peer.loss_trace[0] > 0
    assert not np.array_equal(with_peer.x_adv, x)


def test_attacks_leave_models_untouched(rng):
    student = make_model("mlp-s", (4,))
    peer = make_model("mlp-p", (4,), seed=2, role="peer")
    before_s, before_p = snapshot(student), snapshot(peer)
    x = rng.uniform(size=(8, 4))
    y = rng.integers(0, 3, size=8)
    pgd(student, x, y, AttackConfig(steps=5, objective="kl", random_start=True), reference=peer)
    fgsm(student, x, y)
    mi_fgsm(student, x, y)
    cw_l2(student, x, y, steps=5)
    unbounded_pgd(student, x, y, steps=5)
    for k, v in before_s.items():
        assert np.array_equal(student.params[k].data, v)
    for k, v in before_p.items():
        assert np.array_equal(peer.params[k].data, v)
    assert all(t.grad is None for t in student.params)


# ---------------------------------------------------------------- MI-FGSM


def test_mi_fgsm_without_momentum_equals_pgd_bitwise(rng):
    m = make_model("mlp-p", (6,))
    x = rng.uniform(size=(15, 6))
    y = rng.integers(0, 3, size=15)
    a = mi_fgsm(m, x, y, AttackConfig(steps=10, momentum_decay=0.0)).x_adv
    b = pgd(m, x, y, AttackConfig(steps=10)).x_adv
    assert np.array_equal(a, b)


def test_mi_fgsm_feasible_and_momentum_changes_path(rng):
    m = make_model("mlp-s", (6,))
    x = rng.uniform(size=(15, 6))
    y = rng.integers(0, 3, size=15)
    seen = []
    res = mi_fgsm(m, x, y, AttackConfig(steps=10, epsilon=0.1, step_size=0.04),
                  trace_hook=lambda xa, x0: seen.append(np.abs(xa - x0).max()))
    assert len(seen) == 10 and max(seen) <= 0.1 + 1e-9
    assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1


# ---------------------------------------------------------------- CW


def test_cw_margin_definition():
    z = Tensor([[3.0, 1.0, 2.0], [0.0, 5.0, 1.0]])
    assert np.allclose(cw_margin(z, [0, 0]).data, [1.0, 0.0])
    assert np.allclose(cw_margin(z, [0, 0], kappa=10.0).data, [1.0, -5.0])


def test_cw_direction_on_linear_two_class_model(rng):
    w = rng.normal(size=(5, 2))
    m = linear_model(w, [0.0, 0.0])
    x = np.full((1, 5), 0.5)
    y = [int(np.argmax(x @ w))]
    res = cw_l2(m, x, y, AttackConfig(c_balance=0.1), steps=100, lr=0.01)
    delta = (res.x_adv - x)[0]
    wt, wo = w[:, y[0]], w[:, 1 - y[0]]
    analytic = -(wt - wo)
    cos = delta @ analytic / (np.linalg.norm(delta) * np.linalg.norm(analytic))
    assert math.degrees(math.acos(min(1.0, cos))) < 5.0


def test_cw_on_misclassified_input_stays_at_zero():
    m = linear_model([[1.0, -1.0], [1.0, -1.0]], [0.0, 0.0])
    x = np.array([[0.6, 0.6]])
    res = cw_l2(m, x, [1], steps=20)
    assert np.array_equal(res.x_adv, x)
    assert all(b <= a for a, b in zip(res.loss_trace, res.loss_trace[1:]))


def test_cw_requires_positive_balance():
    with pytest.raises(AttackConfigError):
        cw_l2(make_model("mlp-s", (2,)), np.zeros((1, 2)), [0], AttackConfig(c_balance=0.0))


# ---------------------------------------------------------------- unbounded


def test_unbounded_keeps_domain_only(rng):
    m = make_model("mlp-s", (4,))
    x = rng.uniform(size=(10, 4))
    res = unbounded_pgd(m, x, rng.integers(0, 3, size=10), steps=60, step_size=0.05)
    assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1
    assert np.abs(res.x_adv - x).max() > 8 / 255


def test_run_attack_dispatch(rng):
    m = make_model("mlp-s", (4,))
    x = rng.uniform(size=(4, 4))
    y = rng.integers(0, 3, size=4)
    cfg = AttackConfig(steps=3)
    assert np.array_equal(run_attack("pgd", m, x, y, cfg).x_adv, pgd(m, x, y, cfg).x_adv)
    assert np.array_equal(run_attack("fgsm", m, x, y, cfg).x_adv, fgsm(m, x, y, cfg).x_adv)
    for name in ("mi-fgsm", "cw-l2", "unbounded"):
        assert run_attack(name, m, x, y, cfg).x_adv.shape == x.shape
    with pytest.raises((AttackConfigError, ValueError)):
        run_attack("deepfool", m, x, y, cfg)


def test_cnn_attack_shapes(rng):
    m = make_model("cnn-t", (1, 8, 8))
    x = rng.uniform(size=(3, 1, 8, 8))
    res = pgd(m, x, [0, 1, 2], AttackConfig(steps=2))
    assert res.x_adv.shape == x.shape and np.abs(res.x_adv - x).max() <= 8 / 255 + 1e-9


# ---------------------------------------------------------------- effectiveness


def test_pgd_raises_loss_on_a_trained_model():
    from peerlab.data import gen_synthetic
    from peerlab.nn import preset
    from peerlab.train import TrainConfig, train_natural

    data = gen_synthetic("gauss-blobs", 3, 900, 0.08, seed=0)
    test = gen_synthetic("gauss-blobs", 3, 300, 0.08, seed=1)
    cfg = TrainConfig(method="natural", epochs=10, lr_decay_epochs=(), lr_initial=0.05)
    model = Model(preset("mlp-s", (2,), 3), train_natural(preset("mlp-s", (2,), 3), data, cfg).params)
    x, y = test.inputs, test.labels
    clean = cross_entropy(y, model(x)).item()
    adv = cross_entropy(y, model(pgd(model, x, y, AttackConfig(epsilon=0.05, step_size=0.0125)).x_adv)).item()
    assert adv >= clean
