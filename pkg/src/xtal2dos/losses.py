"""Differentiable spectral losses. Targets are plain arrays, predictions Tensors.

All losses accept a single spectrum (l_y,) or a batch (batch, l_y); for a
batch the per-sample losses are averaged.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DomainError, Tensor

CLAMP = 1e-10


def _check(y: np.ndarray, y_hat: Tensor) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise T.ShapeError(f"target shape {y.shape} does not match prediction {y_hat.shape}")
    if np.any(y < 0):
        raise DomainError("negative target value")
    return y


def _batch_mean(total: Tensor, y: np.ndarray) -> Tensor:
    return total * (1.0 / y.shape[0]) if y.ndim == 2 else total


def _ylogy(y: np.ndarray) -> float:
    pos = y > 0
    return float(np.sum(y[pos] * np.log(y[pos])))


def kl_loss(y, y_hat: Tensor, eps: float = CLAMP) -> Tensor:
    """D_KL(y || y_hat) = sum y log(y / y_hat), with 0 log 0 = 0."""
    y = _check(y, y_hat)
    cross = T.sum_(T.constant(y) * T.log(T.clamp_min(y_hat, eps)))
    return _batch_mean(_ylogy(y) - cross, y)


def generalized_kl_loss(y, y_hat: Tensor, eps: float = CLAMP) -> Tensor:
    """sum [y log(y / y_hat) - y + y_hat]: the Bregman divergence of x log x.

    Valid for unnormalized non-negative sequences; equals ``kl_loss`` when
    both sides sum to one.
    """
    y = _check(y, y_hat)
    clamped = T.clamp_min(y_hat, eps)
    total = (_ylogy(y) - float(y.sum())) - T.sum_(T.constant(y) * T.log(clamped)) + T.sum_(clamped)
    return _batch_mean(total, y)


def mse_loss(y, y_hat: Tensor) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise T.ShapeError(f"target shape {y.shape} does not match prediction {y_hat.shape}")
    return T.mean(T.square(y_hat - T.constant(y)))


LOSSES = {"kl": kl_loss, "generalized_kl": generalized_kl_loss, "mse": mse_loss}


def loss_fn(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}") from None
