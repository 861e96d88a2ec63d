"""Parameter containers: a small Module system over the tensor engine.

Modules discover parameters by walking their attributes (and lists of
child modules), yielding stable dotted names, the same names the
checkpoint format stores.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import RngState
from .tensor import Tensor


class Module:
    """Base for parameterized components. Stateless given its parameters."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{path}.{i}", item

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def trainable_parameters(self):
        for _, p in self.named_parameters():
            if p.requires_grad:
                yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(
                f"state dict mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(
                    f"parameter '{name}' has shape {p.shape}, "
                    f"checkpoint provides {arr.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype, copy=False))


class Conv2d(Module):
    """Convolution layer; weights uniform in ±1/sqrt(fan_in), zero bias."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=None, groups=1, rng=None, zero_init=False,
                 dtype=np.float32):
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"Conv2d: {in_channels}->{out_channels} not divisible by "
                f"groups={groups}")
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            if rng is None:
                raise ShapeError("Conv2d with random init needs an rng stream")
            gen = rng.spawn() if isinstance(rng, RngState) else rng
            fan_in = (in_channels // groups) * kernel_size * kernel_size
            bound = 1.0 / np.sqrt(fan_in)
            w = gen.uniform(-bound, bound, size=shape).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class ChannelLayerNorm(Module):
    """LayerNorm over the channel axis of [B,C,H,W]; gamma=1, beta=0 at init."""

    def __init__(self, channels, eps=1e-6, dtype=np.float32):
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.layer_norm_channel(x, self.gamma, self.beta, eps=self.eps)


class ChannelScale(Module):
    """Per-channel multiplicative gate, initialized to exactly zero so the
    branch it gates contributes nothing at step 0."""

    def __init__(self, channels, dtype=np.float32):
        self.scale = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        c = self.scale.shape[0]
        return T.mul(x, T.reshape(self.scale, (1, c, 1, 1)))
