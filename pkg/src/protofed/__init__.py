"""Two-phase federated one-class learning: prototypical distillation, then per-client flows."""

__version__ = "0.1.0"
