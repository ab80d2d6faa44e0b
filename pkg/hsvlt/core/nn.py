"""
Parameters, modules and the small set of layers the model is built from.

Modules register children and Parameters as plain attributes; attribute
insertion order defines parameter order and the dotted attribute path
becomes the parameter name (e.g. "stage2.block0.ivla.omega_v1.weight").
"""
import contextlib
from enum import Enum
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from hsvlt.core import ops
from hsvlt.core.errors import ContainerError, ShapeError
from hsvlt.core.rng import Rng
from hsvlt.core.tensor import Tensor, get_default_dtype

CONV_INIT_STD = 0.02
NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1

_shape_only = False


@contextlib.contextmanager
def shape_only() -> Iterator[None]:
    """Build modules with unallocated zero parameters (counting only, not runnable for training)."""
    global _shape_only
    previous = _shape_only
    _shape_only = True
    try:
        yield
    finally:
        _shape_only = previous


def is_shape_only() -> bool:
    return _shape_only


class InitKind(str, Enum):
    ZEROS = "zeros"
    ONES = "ones"
    UNIFORM = "uniform"
    TRUNCATED_NORMAL = "truncated_normal"


class Parameter(Tensor):
    """Trainable tensor carrying its module path and how it was initialized"""

    def __init__(self, data, init_spec: str = InitKind.ZEROS.value, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.init_spec = init_spec
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, init={self.init_spec})"


def make_parameter(shape, kind: InitKind, rng: Optional[Rng] = None, scale: float = CONV_INIT_STD) -> Parameter:
    """
    Create a parameter. Without an rng, random kinds fall back to zeros.
    Inside shape_only() every parameter is a read-only zero view that
    allocates nothing, which is how cost counting builds full-size models.
    """
    shape = tuple(int(s) for s in shape)
    dtype = get_default_dtype()
    if _shape_only:
        return Parameter(np.broadcast_to(np.zeros((), dtype=dtype), shape), init_spec=kind.value)
    if kind == InitKind.ONES:
        data, spec = np.ones(shape, dtype=dtype), "ones"
    elif kind == InitKind.TRUNCATED_NORMAL:
        spec = f"truncated_normal(std={scale})"
        data = rng.truncated_normal(scale, shape).astype(dtype) if rng is not None else np.zeros(shape, dtype=dtype)
    elif kind == InitKind.UNIFORM:
        spec = f"uniform(-{scale},{scale})"
        data = rng.uniform(-scale, scale, shape).astype(dtype) if rng is not None else np.zeros(shape, dtype=dtype)
    else:
        data, spec = np.zeros(shape, dtype=dtype), "zeros"
    return Parameter(data, init_spec=spec)


def child_rng(rng: Optional[Rng], name: str) -> Optional[Rng]:
    return rng.child(name) if rng is not None else None


class Module:
    """Base class: parameter discovery, train/eval mode and state round-trip"""

    buffer_names: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for attr, value in vars(self).items():
            if isinstance(value, Module):
                yield attr, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{attr}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for attr, child in self.children():
            yield from child.named_buffers(f"{prefix}{attr}.")

    def bind_names(self) -> None:
        """Stamp every Parameter with its dotted path."""
        for name, param in self.named_parameters():
            param.name = name

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(buf, copy=True) for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise ContainerError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, param in params.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != model shape {param.shape}")
            param.data = value.astype(param.dtype, copy=True)
        for name, buf in buffers.items():
            value = np.asarray(state[name])
            if value.shape != buf.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != model shape {buf.shape}")
            np.copyto(buf, value.astype(buf.dtype))


class Pointwise(Module):
    """1x1 convolution over the channel axis of (B, C, N) or (B, C, H, W)."""

    def __init__(self, in_channels: int, out_channels: int, rng: Optional[Rng] = None, bias: bool = True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.weight = make_parameter((out_channels, in_channels), InitKind.TRUNCATED_NORMAL, rng)
        if bias:
            self.bias = make_parameter((out_channels,), InitKind.ZEROS)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim not in (3, 4) or x.shape[1] != self.in_channels:
            raise ShapeError(f"pointwise conv expects {self.in_channels} input channels, got {x.shape}")
        if x.ndim == 4:
            height, width = x.shape[2:]
            return ops.unflatten_spatial(self.forward(ops.flatten_spatial(x)), height, width)
        out = ops.matmul(self.weight, x)
        if hasattr(self, "bias"):
            out = out + ops.reshape(self.bias, (1, self.out_channels, 1))
        return out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, rng: Optional[Rng] = None, bias: bool = True):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = make_parameter((out_channels, in_channels // groups, kernel, kernel),
                                     InitKind.TRUNCATED_NORMAL, rng)
        if bias:
            self.bias = make_parameter((out_channels,), InitKind.ZEROS)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, getattr(self, "bias", None), stride=self.stride,
                          padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    """Normalizes over the channel axis, per position or token."""

    def __init__(self, channels: int, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps
        self.gamma = make_parameter((channels,), InitKind.ONES)
        self.beta = make_parameter((channels,), InitKind.ZEROS)

    def forward(self, x: Tensor) -> Tensor:
        return ops.normalize(x, "layer", eps=self.eps, gamma=self.gamma, beta=self.beta)


class BatchNorm(Module):
    """
    Batch normalization with running statistics.

    Training mode normalizes with the batch mean and biased variance, then
    folds the batch mean and unbiased variance into the running estimates
    with momentum 0.1. Eval mode normalizes with the running estimates.
    """

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = NORM_EPS, momentum: float = BATCH_NORM_MOMENTUM):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = make_parameter((channels,), InitKind.ONES)
        self.beta = make_parameter((channels,), InitKind.ZEROS)
        self.running_mean = np.zeros(channels, dtype=get_default_dtype())
        self.running_var = np.ones(channels, dtype=get_default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            axes = ops.normalization_axes("batch", x.ndim)
            count = int(np.prod([x.shape[a] for a in axes]))
            batch_mean = x.data.mean(axis=axes)
            batch_var = x.data.var(axis=axes) * (count / (count - 1) if count > 1 else 1.0)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * batch_mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * batch_var
            return ops.normalize(x, "batch", eps=self.eps, gamma=self.gamma, beta=self.beta)
        mean = ops.affine_view(Tensor(self.running_mean, dtype=x.dtype), x.ndim)
        scale = ops.affine_view(Tensor(1.0 / np.sqrt(self.running_var + self.eps), dtype=x.dtype), x.ndim)
        out = (x - mean) * scale
        return out * ops.affine_view(self.gamma, x.ndim) + ops.affine_view(self.beta, x.ndim)
