"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

EPS = float(np.finfo(np.float64).eps)
NOISE_ULPS = 64.0


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error per coordinate is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``,
    except that a coordinate whose two estimates both sit below the difference
    quotient's round-off floor (``NOISE_ULPS * eps * |f| / h``) counts as exact:
    such a gradient is zero as far as finite differences can tell.
    ``max_coords`` caps the number of coordinates probed per input (a random
    subset drawn from ``rng``); ``None`` probes all of them. Any non-finite
    gradient yields ``inf``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    out.backward()
    worst = 0.0
    for t in inputs:
        ad = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(ad)):
            return float("inf")
        flat_idx = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            flat_idx = rng.choice(t.size, size=max_coords, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(int(k), t.shape)
            orig = t.data[idx]
            with no_grad():
                t.data[idx] = orig + h
                fp = float(f(*inputs).data)
                t.data[idx] = orig - h
                fm = float(f(*inputs).data)
            t.data[idx] = orig
            fd = (fp - fm) / (2.0 * h)
            if not np.isfinite(fd):
                return float("inf")
            noise = NOISE_ULPS * EPS * max(abs(fp), abs(fm)) / h
            if abs(ad[idx]) <= noise and abs(fd) <= noise:
                continue
            err = abs(ad[idx] - fd) / max(1e-8, abs(ad[idx]) + abs(fd))
            worst = max(worst, float(err))
    return worst
