"""Differentiable augmentation-policy search across depth, type, order and magnitude."""

__all__ = ["autodiff", "relaxations", "transforms", "policy", "bilevel", "data", "cli"]
