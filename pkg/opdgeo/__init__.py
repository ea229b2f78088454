"""Parameter-update geometry lab for on-policy distillation and RL."""

__version__ = "0.1.0"
