"""Parameter containers and the small set of layers shared by every branch."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Holds parameters (``Tensor`` attributes), buffers (numpy arrays in
    ``self.buffers``) and child modules (attributes or lists of modules)."""

    training = True

    def __init__(self):
        self.buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for key, arr in getattr(self, "buffers", {}).items():
            yield f"{prefix}{key}", arr
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for k in list(m.buffers):
                m.buffers[k] = m.buffers[k].astype(dtype)
        return self

    @property
    def dtype(self):
        for p in self.parameters().values():
            return p.dtype
        return np.dtype(np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        sd = {f"param/{k}": v.data for k, v in self.named_parameters()}
        sd.update({f"buffer/{k}": v for k, v in self.named_buffers()})
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for k, p in params.items():
            arr = sd[f"param/{k}"]
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)
        owners = {}
        for m_prefix, m in _named_modules(self):
            for k in m.buffers:
                owners[f"{m_prefix}{k}"] = (m, k)
        for path, (m, k) in owners.items():
            m.buffers[k] = np.array(sd[f"buffer/{path}"], dtype=m.buffers[k].dtype)


def _named_modules(mod: Module, prefix: str = ""):
    yield prefix, mod
    for key, val in vars(mod).items():
        if isinstance(val, Module):
            yield from _named_modules(val, f"{prefix}{key}.")
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if isinstance(item, Module):
                    yield from _named_modules(item, f"{prefix}{key}.{i}.")


def param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    bound = math.sqrt(3.0 / fan_in)  # unit-variance preserving
    return param(rng.uniform(-bound, bound, size=shape), dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, zero_init: bool = False,
                 dtype=np.float32):
        super().__init__()
        if zero_init:
            self.w = param(np.zeros((d_in, d_out)), dtype)
        else:
            self.w = fan_in_uniform(rng, (d_in, d_out), d_in, dtype)
        self.b = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x):
        return F.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel, stride=1, padding=0, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = stride
        self.padding = padding
        self.w = fan_in_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw, dtype)
        self.b = param(np.zeros(c_out), dtype) if bias else None

    def __call__(self, x):
        return F.conv2d(x, self.w, self.b, self.stride, self.padding)


class DSConv(Module):
    """Depthwise ``k x k`` + pointwise ``1 x 1``."""

    def __init__(self, rng, channels: int, kernel: int = 3, dtype=np.float32):
        super().__init__()
        self.pad = kernel // 2
        self.w_dw = fan_in_uniform(rng, (channels, kernel, kernel), kernel * kernel, dtype)
        self.b_dw = param(np.zeros(channels), dtype)
        self.w_pw = fan_in_uniform(rng, (channels, channels, 1, 1), channels, dtype)
        self.b_pw = param(np.zeros(channels), dtype)

    def __call__(self, x):
        return F.depthwise_separable_conv(x, self.w_dw, self.w_pw, self.b_dw, self.b_pw, self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        super().__init__()
        self.gamma = param(np.ones(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.gamma = param(np.ones(channels), dtype)
        self.beta = param(np.zeros(channels), dtype)
        self.buffers = {"running_mean": np.zeros(channels, dtype), "running_var": np.ones(channels, dtype)}

    def __call__(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.buffers["running_mean"],
                            self.buffers["running_var"], self.training, self.momentum)
