"""Gradient-check helpers: finite differences for piecewise-smooth objectives and well-conditioned setups.

Every ReLU input sign and every L1 residual sign is recorded on each
forward. The step used for a coordinate is the largest of ``steps`` for which
both perturbed forwards reproduce the unperturbed pattern, so the difference
quotient never straddles a kink. Coordinates where no step qualifies are
skipped and counted.
"""

import numpy as np
import pytest

from ipmbev.geometry import Camera, CameraRig
from ipmbev.network import ModelConfig
from ipmbev.tensorcore import functional as F


def kink_aware_check(loss, params, rng, coords_per_tensor=2, steps=(1e-5, 1e-6, 1e-7), rel_floor=0.0,
                     details=None):
    """Return ``(worst_rel_err, judged, skipped)`` for scalar ``loss()`` over ``params`` (name -> Tensor).

    Relative errors use ``max(|a|, |n|, floor)`` with ``floor = max(1e-8, rel_floor * max|grad|)``
    over all parameters, so gradients far below the objective's scale are
    not judged on round-off alone. A list passed as ``details`` collects ``(name, index, analytic, numeric, step)`` per judged coordinate.
    """
    relu, l1 = F.relu, F.l1_masked_mean
    signs = []

    def recording_relu(x):
        signs.append(np.packbits(F._data(x) > 0))
        return relu(x)

    def recording_l1(a, b, mask):
        signs.append(np.packbits((F._data(a) - F._data(b)) > 0))
        return l1(a, b, mask)

    def run():
        signs.clear()
        v = float(loss().data)
        return v, np.concatenate(signs) if signs else np.zeros(0, np.uint8)

    mp = pytest.MonkeyPatch()
    mp.setattr(F, "relu", recording_relu)
    mp.setattr(F, "l1_masked_mean", recording_l1)
    try:
        for p in params.values():
            p.grad = None
        signs.clear()
        loss().backward()
        s0 = np.concatenate(signs) if signs else np.zeros(0, np.uint8)
        top = max((float(np.abs(p.grad).max()) for p in params.values() if p.grad is not None), default=0.0)
        floor = max(1e-8, rel_floor * top)
        worst, judged, skipped = 0.0, 0, 0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            grad = np.zeros(flat.size) if p.grad is None else p.grad.reshape(-1)
            for i in rng.choice(flat.size, min(coords_per_tensor, flat.size), replace=False):
                orig, num = flat[i], None
                for step in steps:
                    flat[i] = orig + step
                    fp, sp = run()
                    flat[i] = orig - step
                    fm, sm = run()
                    flat[i] = orig
                    if np.array_equal(sp, s0) and np.array_equal(sm, s0):
                        num = (fp - fm) / (2 * step)
                        break
                if num is None:
                    skipped += 1
                    continue
                a = float(grad[i])
                judged += 1
                if details is not None:
                    details.append((name, int(i), a, num, step))
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    finally:
        mp.undo()
    return worst, judged, skipped


def cover_rig(cfg: ModelConfig, height: float = 40.0) -> CameraRig:
    """One downward camera at the configured image size whose footprint is the whole grid."""
    g, (W, H) = cfg.grid, cfg.image_size
    R = np.diag([1.0, -1.0, -1.0])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ np.array([0.5 * sum(g.x_range), 0.5 * sum(g.y_range), height])
    fx = height * W / (g.x_range[1] - g.x_range[0])
    fy = height * H / (g.y_range[1] - g.y_range[0])
    return CameraRig((Camera("down", np.array([[fx, 0, W / 2], [0, fy, H / 2], [0, 0, 1.0]]), T, W, H),))


def randomize_biases(model, rng, scale=0.3):
    for k, p in model.parameters().items():
        if k.endswith(".b") or ".b_" in k or k.endswith("beta"):
            p.data[...] = rng.uniform(-scale, scale, p.shape)
