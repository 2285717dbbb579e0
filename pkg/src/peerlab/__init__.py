"""Desk-scale adversarial distillation laboratory (peer tutoring, PGD family, SWA)."""

__version__ = "0.1.0"
