"""
Peer tutoring on the desk
=========================

Trains the desk PeerAiD pair from ``configs/desk-peeraid.cfg`` through the
library API (about 20 seconds on one core), then looks at who fools whom.
The command-line tool does the same with ``peerlab train``.
"""

from pathlib import Path

import numpy as np

from peerlab.attacks import AttackConfig, pgd
from peerlab.cli import synthetic_splits
from peerlab.config import RunConfig
from peerlab.data import class_gap
from peerlab.evaluation import cross_robustness, obfuscation_battery, penultimate_cosine
from peerlab.nn import Model, preset
from peerlab.train import train_peeraid

cfg = RunConfig.load(Path(__file__).resolve().parent.parent / "configs" / "desk-peeraid.cfg")
train_set, test_set = synthetic_splits(cfg)
gap = class_gap(train_set)
print(f"{len(train_set)} training points in {train_set.input_shape[0]} dims, class gap {gap:.3f}")

tcfg = cfg.resolved(gap).train_config()
student_spec = preset(cfg["model.student"], train_set.input_shape, cfg["data.classes"], "student")
peer_spec = preset(cfg["model.peer"], train_set.input_shape, cfg["data.classes"], "peer")
result = train_peeraid(student_spec, peer_spec, train_set, tcfg)
print("best epoch", result.best_epoch, "of", len(result.logs))

# A few epochs of the validation curve, PGD-10 on the held-out split.
for log in result.logs[::20]:
    print(f"  epoch {log.epoch:3d}  lr {log.lr:.4f}  clean {log.clean_acc:.3f}  robust {log.robust_acc:.3f}")

student = Model(student_spec, result.best)
peer = Model(peer_spec, result.peer_best)

# The peer only ever saw examples crafted against the student. Attacks
# crafted against the student barely hurt it; attacks against itself do.
attack = AttackConfig(epsilon=tcfg.eval_attack.epsilon, step_size=tcfg.eval_attack.step_size, steps=20)
cross = cross_robustness({"student": student, "peer": peer}, test_set, attack)
print("clean", cross.clean)
print("rows: defender, columns: attack source", cross.names)
print(np.round(cross.matrix, 3))

# Penultimate features of the peer move much further under its own attack.
x, y = test_set.inputs[:300], test_set.labels[:300]
variants = {"vs_student": pgd(student, x, y, attack).x_adv, "vs_peer": pgd(peer, x, y, attack).x_adv}
table = penultimate_cosine(peer, x, variants)
print("peer feature cosine to clean", {k: round(v, 3) for k, v in table.values.items()})

# Sanity checks for masked gradients on the student.
battery = obfuscation_battery(student, test_set, attack)
for check in battery.checks:
    print(f"  {check.name:22s} passed={check.passed}")
