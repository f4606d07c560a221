"""Differentiable bird's-eye-view driving scenarios and adversarial scenario generation."""

__version__ = "0.1.0"
