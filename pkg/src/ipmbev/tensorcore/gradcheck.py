"""Central finite differences against reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-5, max_coords: int | None = 8,
               rng: np.random.Generator | int | None = 0, floor: float = 1e-8,
               rel_floor: float = 0.0, details: bool = False):
    """Max relative error between autodiff and central differences.

    ``f`` recomputes a scalar from the current values of ``params`` (a dict
    name -> Tensor or a list of Tensors). At most ``max_coords`` randomly
    chosen coordinates are checked per tensor (all when None). The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, floor')`` where
    ``floor' = max(floor, rel_floor * max|a|)`` over that tensor. A nonzero
    ``rel_floor`` keeps coordinates whose gradient is far below the tensor's
    scale from being judged on finite-difference round-off alone.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    for p in params.values():
        p.grad = None
    out = f()
    out.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    worst = 0.0
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        errs = []
        a_all = analytic[name].reshape(-1)
        fl = max(floor, rel_floor * (float(np.abs(a_all).max()) if a_all.size else 0.0))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(a_all[i])
            errs.append(abs(a - num) / max(abs(a), abs(num), fl))
        report[name] = max(errs) if errs else 0.0
        worst = max(worst, report[name])
    return (worst, report) if details else worst
