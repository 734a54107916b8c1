"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, record


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(loss_fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Perturb every entry of ``array`` in place by +-h and difference ``loss_fn``."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(
    build_loss: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5, joint: bool = False
) -> list[float]:
    """Relative error of tape gradients against finite differences, per tensor.

    ``build_loss`` must be a deterministic function of the tensors' data that
    returns a scalar Tensor. ``joint`` scores the concatenation of all
    gradients as one vector instead, which is the meaningful measure when some
    tensor's true gradient is identically zero (a bias feeding batch norm).
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        return build_loss().item()

    numeric = [numerical_gradient(value, t.data, h) for t in tensors]
    if joint:
        flat = lambda arrs: np.concatenate([a.reshape(-1) for a in arrs])
        return [relative_error(flat(analytic), flat(numeric))]
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]


def project(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)``; a fixed random ``weights`` turns any op into a checkable loss."""
    if weights.shape != x.shape:
        raise ValueError(f"projection weights {weights.shape} do not match {x.shape}")
    return record("project", (x,), np.full((1, 1, 1, 1), float(np.vdot(x.data, weights))), lambda g: (g.item() * weights,))
