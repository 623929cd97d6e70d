"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .numerics import Tape, Tensor


def analytic_grads(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [t.grad.copy() for t in tensors]


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, indices, h: float = 1e-5) -> np.ndarray:
    out = np.empty(len(indices))
    flat = t.data.reshape(-1)
    for n, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn().item()
        flat[i] = old - h
        down = loss_fn().item()
        flat[i] = old
        out[n] = (up - down) / (2 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Relative error between tape and central-difference gradients, one value per tensor.

    ``max_entries`` limits each tensor to a random subset of its entries.
    """
    rng = rng or np.random.default_rng(0)
    grads = analytic_grads(loss_fn, tensors)
    errors = []
    for t, g in zip(tensors, grads):
        size = t.data.size
        if max_entries is None or size <= max_entries:
            idx = np.arange(size)
        else:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        errors.append(rel_error(g.reshape(-1)[idx], numeric_grad(loss_fn, t, idx, h)))
    return errors
