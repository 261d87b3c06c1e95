"""Shared test utilities: finite-difference gradient checks."""

import numpy as np
import torch


def fd_grad(loss_fn, tensor: torch.Tensor, indices, h: float = 1e-6) -> dict[int, float]:
    """Central finite differences of loss_fn() wrt flat entries of tensor.

    loss_fn must re-evaluate the loss from scratch; tensor is mutated in
    place and restored. Use double precision models.
    """
    flat = tensor.data.reshape(-1)
    grads = {}
    for i in indices:
        original = flat[i].item()
        flat[i] = original + h
        up = loss_fn()
        flat[i] = original - h
        down = loss_fn()
        flat[i] = original
        grads[int(i)] = (up - down) / (2 * h)
    return grads


def max_rel_error(analytic: dict[int, float], numeric: dict[int, float], floor: float = 1e-8):
    """Worst relative disagreement over the checked coordinates."""
    worst = 0.0
    for i, num in numeric.items():
        ana = analytic[i]
        denom = max(abs(ana), abs(num), floor)
        worst = max(worst, abs(ana - num) / denom)
    return worst


def pick_indices(tensor: torch.Tensor, count: int, rng: np.random.Generator):
    n = tensor.numel()
    return rng.choice(n, size=min(count, n), replace=False).tolist()
