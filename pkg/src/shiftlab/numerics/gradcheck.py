"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, backward, no_grad


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    *,
    fd_dtype=np.float64,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` closes over ``params`` and returns a scalar tensor.  The tape
    gradient is taken at the params' own precision; finite differences are
    evaluated with the params promoted to ``fd_dtype`` so that the oracle is
    not limited by 32-bit rounding.  ``max_elements`` caps how many entries
    per parameter are probed (chosen by a seeded generator).
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params)
    ad_grads = [p.grad.astype(np.float64) for p in params]

    originals = [p.data for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(fd_dtype)
        with no_grad():
            v1, v2 = float(f().data), float(f().data)
            if v1 != v2:
                raise ContractError("f is not deterministic; seed any randomness inside it")
            for p, g_ad in zip(params, ad_grads):
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
                for i in idx:
                    old = flat[i]
                    flat[i] = old + h
                    fp = float(f().data)
                    flat[i] = old - h
                    fm = float(f().data)
                    flat[i] = old
                    g_fd = (fp - fm) / (2.0 * h)
                    err = float(relative_error(g_ad.reshape(-1)[i], g_fd))
                    worst = max(worst, err)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return worst
