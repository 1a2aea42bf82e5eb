"""Tiny module system: parameter registration, train/eval mode, standard layers."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class tracking parameters, buffers and child modules.

    Attribute assignment registers Tensors with requires_grad as
    parameters, numpy arrays stored via ``register_buffer`` as buffers
    (checkpointed but not optimized), and Module values as children.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = ""):
        """Parameters plus buffers, as (name, ndarray) pairs for checkpointing."""
        for name, p in self._params.items():
            yield prefix + name, p.data
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_state(prefix + cname + ".")

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        for name, p in self._params.items():
            key = prefix + name
            src = arrays[key]
            if src.shape != p.data.shape:
                raise ValueError(f"state shape mismatch for '{key}': "
                                 f"{src.shape} vs {p.data.shape}")
            p.data = src.astype(np.float32).copy()
        for name in self._buffers:
            key = prefix + name
            buf = arrays[key].astype(np.float32).copy()
            self._buffers[name] = buf
            object.__setattr__(self, name, buf)
        for cname, child in self._children.items():
            child.load_state(arrays, prefix + cname + ".")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 bias_init: float = 0.0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            kaiming_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k),
            requires_grad=True)
        self.bias = None
        if bias:
            self.bias = Tensor(np.full(out_ch, bias_init, dtype=np.float32),
                               requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(ch, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(ch, dtype=np.float32))
        self.register_buffer("running_var", np.ones(ch, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta,
                             self.running_mean, self.running_var,
                             training=self.training,
                             momentum=self.momentum, eps=self.eps)


class ConvBnSilu(Module):
    """Conv -> BatchNorm -> SiLU, the basic block everything else composes."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        super().__init__()
        if padding is None:
            padding = k // 2
        self.conv = Conv2d(in_ch, out_ch, k, rng, stride=stride,
                           padding=padding, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x)).silu()
