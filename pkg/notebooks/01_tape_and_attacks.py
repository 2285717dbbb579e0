"""
A tape, a small network and three l-infinity attacks
====================================================

Run with ``python3 notebooks/01_tape_and_attacks.py``. Everything below is
plain numpy underneath; the printouts are the point.
"""

import numpy as np

from peerlab import tensor as T
from peerlab.attacks import AttackConfig, fgsm, mi_fgsm, pgd
from peerlab.data import class_gap, gen_synthetic
from peerlab.evaluation import accuracy, robust_accuracy
from peerlab.losses import cross_entropy
from peerlab.nn import Model, preset
from peerlab.train import TrainConfig, train_natural

# A Tensor records every operation on a tape; backward walks it in reverse.
a = T.Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
loss = T.sum_(T.mul(T.relu(a), a))
grads = T.backward(loss)
print("d/da sum(relu(a) * a) =", grads[a])   # 2a where a > 0, else 0

# The same engine drives a whole network. Check one input gradient against
# central differences.
spec = preset("mlp-s", (2,), 3)
model = Model.create(spec, seed=0)
x = np.array([[0.2, 0.7]])
y = np.array([1])
xt = T.Tensor(x, requires_grad=True)
analytic = T.backward(cross_entropy(y, model(xt)))[xt]
numeric = T.finite_diff_grad(lambda v: cross_entropy(y, model(v)), x)
print("analytic", analytic.round(6), "numeric", numeric.round(6))

# Train a plain classifier on three Gaussian blobs in the unit square.
data = gen_synthetic("gauss-blobs", 3, 1500, 0.08, seed=0)
test = gen_synthetic("gauss-blobs", 3, 500, 0.08, seed=1)
cfg = TrainConfig(method="natural", epochs=15, lr_initial=0.05, lr_decay_epochs=(10,),
                  eval_attack=AttackConfig(epsilon=0.02, step_size=0.005, steps=5))
model = Model(spec, train_natural(spec, data, cfg).best)
print("clean test accuracy", accuracy(model, test))

# Budgets are set relative to the smallest l-infinity distance between class
# means, so "small" has a meaning on this data.
gap = class_gap(test)
for frac in (0.1, 0.25, 0.5):
    eps = frac * gap
    attack = AttackConfig(epsilon=eps, step_size=eps / 4, steps=20)
    print(f"eps = {frac:.2f} gap: FGSM {robust_accuracy(model, test, attack, 'fgsm'):.3f}  "
          f"PGD-20 {robust_accuracy(model, test, attack, 'pgd'):.3f}  "
          f"MI-FGSM {robust_accuracy(model, test, attack, 'mi-fgsm'):.3f}")

# Every iterate stays inside the ball and the unit box.
eps = 0.25 * gap
attack = AttackConfig(epsilon=eps, step_size=eps / 4, steps=10, random_start=True)
worst = []
pgd(model, test.inputs[:50], test.labels[:50], attack,
    trace_hook=lambda xa, x0: worst.append(np.abs(xa - x0).max()))
print(f"largest perturbation over the run {max(worst):.4f} (budget {eps:.4f})")
for name, fn in (("fgsm", fgsm), ("mi-fgsm", mi_fgsm)):
    res = fn(model, test.inputs[:50], test.labels[:50], attack)
    print(name, "success rate", res.success_mask.mean())
