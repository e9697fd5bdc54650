"""SGD with momentum, AdamW, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def cosine_lr(step: int, total: int, lr0: float, lr_min: float) -> float:
    """``lr_min + (lr0 - lr_min) * (1 + cos(pi * t / T)) / 2``, held at ``lr_min`` for ``t >= T``."""
    t = min(step, total)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass(frozen=True)
class Schedule:
    kind: str = "cosine"  # "constant" | "cosine"
    total_steps: int = 500
    lr_min: float = 1e-5

    def lr(self, step: int, lr0: float) -> float:
        if self.kind == "constant":
            return lr0
        if self.kind == "cosine":
            return cosine_lr(step, self.total_steps, lr0, self.lr_min)
        raise ValueError(f"unknown schedule {self.kind!r}")


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient in {name}")


class Optimizer:
    def __init__(self, params: dict[str, Tensor], lr: float, schedule: Schedule | None = None):
        self.params = params
        self.lr0 = lr
        self.schedule = schedule or Schedule("constant")
        self.step_count = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    @property
    def lr(self) -> float:
        return self.schedule.lr(self.step_count, self.lr0)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict[str, np.ndarray] | None = None) -> float:
        """Apply one update; returns the learning rate used."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for name, g in grads.items():
            if g is not None:
                _check_finite(name, g)
        lr = self.lr
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            self._update(name, p, g.astype(p.dtype, copy=False), lr)
        self.step_count += 1
        return lr

    def _update(self, name, p, g, lr):
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"optim/step_count": np.array(self.step_count)}
        for name, st in self.state.items():
            for k, v in st.items():
                out[f"optim/{name}/{k}"] = v
        return out

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        self.step_count = int(sd["optim/step_count"])
        self.state = {}
        for key, v in sd.items():
            if not key.startswith("optim/") or key == "optim/step_count":
                continue
            name, k = key[len("optim/"):].rsplit("/", 1)
            self.state.setdefault(name, {})[k] = np.array(v)


class SGD(Optimizer):
    def __init__(self, params, lr, momentum: float = 0.0, weight_decay: float = 0.0, schedule=None):
        super().__init__(params, lr, schedule)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def _update(self, name, p, g, lr):
        if self.weight_decay:
            g = g + self.weight_decay * p.data
        if self.momentum:
            st = self.state.setdefault(name, {"buf": np.zeros_like(p.data)})
            st["buf"] = self.momentum * st["buf"] + g
            g = st["buf"]
        p.data = p.data - lr * g


class AdamW(Optimizer):
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, schedule=None):
        super().__init__(params, lr, schedule)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def _update(self, name, p, g, lr):
        b1, b2 = self.betas
        st = self.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        t = self.step_count + 1
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * g * g
        m_hat = st["m"] / (1 - b1 ** t)
        v_hat = st["v"] / (1 - b2 ** t)
        data = p.data * (1 - lr * self.weight_decay)
        p.data = (data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(rule: str, params, lr: float, schedule: Schedule | None = None, **kw) -> Optimizer:
    if rule == "adamw":
        return AdamW(params, lr, schedule=schedule, **kw)
    if rule == "sgd_momentum":
        return SGD(params, lr, momentum=kw.pop("momentum", 0.9), schedule=schedule, **kw)
    if rule == "sgd":
        return SGD(params, lr, schedule=schedule, **kw)
    raise ValueError(f"unknown optimizer rule {rule!r}")


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], rule: str, lr: float,
                   schedule: Schedule | None = None, optimizer: Optimizer | None = None) -> Optimizer:
    """Functional entry point: one update of ``params``; returns the (stateful) optimizer."""
    opt = optimizer or make_optimizer(rule, params, lr, schedule)
    opt.step(grads)
    return opt
