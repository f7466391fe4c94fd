"""Sparse-refined straight-through estimator for retraining pruned weights.

The forward pass sees ``w * mask``.  The gradient computed at the pruned
weights is applied to every entry of the dense ``w``, and pruned entries
get an extra decay ``lambda_w * w`` pulling them toward zero.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class SrsteConfig:
    lambda_w: float = 2e-4
    enabled: bool = True

    def __post_init__(self):
        if self.lambda_w < 0:
            raise ConfigError(f"lambda_w must be non-negative, got {self.lambda_w}")


def _check(w, mask):
    if np.shape(w) != np.shape(mask):
        raise DimensionError(f"mask shape {np.shape(mask)} does not match weight {np.shape(w)}")


def prune_forward(w, mask):
    _check(w, mask)
    return np.asarray(w, dtype=np.float64) * mask


def refined_gradient(w, grad_pruned, mask, cfg):
    """``grad_pruned + lambda_w * (1 - mask) * w``; plain STE when disabled."""
    _check(w, mask)
    _check(w, grad_pruned)
    if not cfg.enabled or cfg.lambda_w == 0:
        return np.asarray(grad_pruned, dtype=np.float64)
    return grad_pruned + cfg.lambda_w * ((1.0 - mask) * w)


def srste_step(w, grad_pruned, mask, gamma, cfg):
    """One plain-SGD SR-STE update of the dense weight ``w``."""
    if not gamma > 0:
        raise ConfigError(f"learning rate gamma must be positive, got {gamma}")
    return w - gamma * refined_gradient(w, grad_pruned, mask, cfg)
