"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between autodiff and central differences.

    ``loss_fn`` must rebuild the graph from the current leaf values and be
    deterministic.  With ``max_entries`` only a random subset of coordinates per
    leaf is probed.  Relative error is |a-n| / max(|a|, |n|, floor).
    """
    for leaf in leaves:
        leaf.zero_grad()
    base = loss_fn()
    if base.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    again = loss_fn()
    if again.data.item() != base.data.item():
        raise RuntimeError("loss_fn is not deterministic under frozen seeds")
    base.backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy()
        flat_idx = np.arange(leaf.data.size)
        if max_entries is not None and flat_idx.size > max_entries:
            flat_idx = np.sort(rng.choice(flat_idx, size=max_entries, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, leaf.shape)
            orig = leaf.data[idx]
            leaf.data[idx] = orig + eps
            up = loss_fn().data.item()
            leaf.data[idx] = orig - eps
            down = loss_fn().data.item()
            leaf.data[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for leaf in leaves:
        leaf.zero_grad()
    return worst
