"""
Differentiable primitives.

Every public function here takes and returns Tensors. Shape contracts are
checked up front and reported as ShapeError naming the offending shapes.
"""
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import special

from hsvlt.core.errors import ConfigError, ShapeError
from hsvlt.core.tensor import Function, Tensor, as_tensor

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} is out of range for a rank-{ndim} tensor")
    return axis % ndim


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable") from exc


# Elementwise arithmetic

class _Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class _Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class _Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class _Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class _Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class _Power(Function):
    def forward(self, x, exponent):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1),)


class _Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class _Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


def add(a, b) -> Tensor:
    return _Add.apply(a, b)


def sub(a, b) -> Tensor:
    return _Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return _Mul.apply(a, b)


def div(a, b) -> Tensor:
    return _Div.apply(a, b)


def neg(x) -> Tensor:
    return _Neg.apply(x)


def power(x, exponent: float) -> Tensor:
    return _Power.apply(x, exponent=exponent)


def exp(x) -> Tensor:
    return _Exp.apply(x)


def log(x) -> Tensor:
    return _Log.apply(x)


def elementwise(a, b, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ConfigError(f"unknown elementwise kind {kind!r}; expected 'add' or 'mul'")


# Reductions and shape manipulation

class _Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape),)


class _Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class _Transpose(Function):
    def forward(self, x, axes):
        self.axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(self.axes) != list(range(x.ndim)):
            raise ShapeError(f"axes {self.axes} are not a permutation for shape {x.shape}")
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class _BroadcastTo(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        try:
            return np.broadcast_to(x, shape)
        except ValueError as exc:
            raise ShapeError(f"cannot broadcast {x.shape} to {tuple(shape)}") from exc

    def backward(self, grad):
        return (_unbroadcast(grad, self.shape),)


class _Concat(Function):
    def forward(self, *arrays, axis):
        if not arrays:
            raise ShapeError("concat needs at least one tensor")
        ndim = arrays[0].ndim
        axis = _normalize_axis(axis, ndim)
        for array in arrays[1:]:
            same_rank = array.ndim == ndim
            if not same_rank or any(array.shape[d] != arrays[0].shape[d] for d in range(ndim) if d != axis):
                raise ShapeError(f"cannot concat {[a.shape for a in arrays]} along axis {axis}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class _IndexSelect(Function):
    def forward(self, x, indices, axis):
        self.shape, self.indices = x.shape, np.asarray(indices, dtype=np.int64)
        self.axis = _normalize_axis(axis, x.ndim)
        return np.take(x, self.indices, axis=self.axis)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(np.moveaxis(out, self.axis, 0), self.indices, np.moveaxis(grad, self.axis, 0))
        return (out,)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis=axis, keepdims=keepdims) / float(count)


def reshape(x, shape: Sequence[int]) -> Tensor:
    return _Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    return _Transpose.apply(x, axes=axes)


def transpose_last2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got shape {x.shape}")
    axes = list(range(x.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return transpose(x, axes)


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    return _BroadcastTo.apply(x, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    return _Concat.apply(*tensors, axis=axis)


def index_select(x, indices, axis: int) -> Tensor:
    """Gather slices along `axis`; repeated indices accumulate gradient."""
    return _IndexSelect.apply(x, indices=indices, axis=axis)


def flatten_spatial(x) -> Tensor:
    """(B, C, H, W) -> (B, C, H*W), row-major: (h, w) lands at h*W + w."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"flatten_spatial expects (B, C, H, W), got {x.shape}")
    batch, channels, height, width = x.shape
    return reshape(x, (batch, channels, height * width))


def unflatten_spatial(x, height: int, width: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] != height * width:
        raise ShapeError(f"cannot unflatten {x.shape} into spatial size {height}x{width}")
    return reshape(x, (x.shape[0], x.shape[1], height, width))


# Matrix product and convolution

class _MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        _broadcast_shape(a.shape[:-2], b.shape[:-2])
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        grad_a = grad @ np.swapaxes(self.b, -1, -2)
        grad_b = np.swapaxes(self.a, -1, -2) @ grad
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


def matmul(a, b) -> Tensor:
    return _MatMul.apply(a, b)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class _Conv2d(Function):
    """Grouped cross-correlation, accumulated one kernel offset at a time."""

    def forward(self, x, w, b=None, *, stride, padding, groups):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects (B, C, H, W) input and 4-d weight, got {x.shape} and {w.shape}")
        batch, c_in, height, width = x.shape
        c_out, c_in_group, k_h, k_w = w.shape
        if groups < 1 or c_in % groups or c_out % groups or c_in_group != c_in // groups:
            raise ShapeError(f"invalid groups={groups} for input channels {c_in} and weight {w.shape}")
        if k_h != k_w:
            raise ShapeError(f"conv2d supports square kernels only, got {k_h}x{k_w}")
        if b is not None and b.shape != (c_out,):
            raise ShapeError(f"bias shape {b.shape} does not match {c_out} output channels")
        out_h = conv_output_size(height, k_h, stride, padding)
        out_w = conv_output_size(width, k_w, stride, padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv2d output size {out_h}x{out_w} is not positive for input {x.shape}")

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.x_groups = padded.reshape(batch, groups, c_in_group, *padded.shape[2:])
        self.w_groups = w.reshape(groups, c_out // groups, c_in_group, k_h, k_w)
        self.geometry = (x.shape, w.shape, stride, padding, groups, out_h, out_w)
        self.has_bias = b is not None

        out = np.zeros((batch, groups, c_out // groups, out_h, out_w), dtype=np.result_type(x, w))
        for i, j, window in self._windows():
            out += np.einsum("bgchw,goc->bgohw", self.x_groups[window], self.w_groups[..., i, j], optimize=True)
        out = out.reshape(batch, c_out, out_h, out_w)
        if b is not None:
            out = out + b[None, :, None, None]
        return out

    def _windows(self):
        _, w_shape, stride, _, _, out_h, out_w = self.geometry
        kernel = w_shape[2]
        for i in range(kernel):
            for j in range(kernel):
                rows = slice(i, i + stride * (out_h - 1) + 1, stride)
                cols = slice(j, j + stride * (out_w - 1) + 1, stride)
                yield i, j, (Ellipsis, rows, cols)

    def backward(self, grad):
        x_shape, w_shape, _, padding, groups, out_h, out_w = self.geometry
        batch, c_in, height, width = x_shape
        grad_groups = grad.reshape(batch, groups, w_shape[0] // groups, out_h, out_w)
        grad_x = np.zeros_like(self.x_groups)
        grad_w = np.zeros_like(self.w_groups)
        for i, j, window in self._windows():
            grad_w[..., i, j] = np.einsum("bgohw,bgchw->goc", grad_groups, self.x_groups[window], optimize=True)
            grad_x[window] += np.einsum("bgohw,goc->bgchw", grad_groups, self.w_groups[..., i, j], optimize=True)
        grad_x = grad_x.reshape(batch, c_in, height + 2 * padding, width + 2 * padding)
        grad_x = grad_x[:, :, padding:padding + height, padding:padding + width]
        grads = [grad_x, grad_w.reshape(w_shape)]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation (no kernel flip) of (B, Cin, H, W) with (Cout, Cin/groups, k, k)."""
    if bias is None:
        return _Conv2d.apply(x, w, stride=stride, padding=padding, groups=groups)
    return _Conv2d.apply(x, w, bias, stride=stride, padding=padding, groups=groups)


# Softmax and normalization

class _Softmax(Function):
    def forward(self, x, axis):
        self.axis = _normalize_axis(axis, x.ndim)
        shifted = x - np.max(x, axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


def softmax(x, axis: int) -> Tensor:
    return _Softmax.apply(x, axis=axis)


class _Standardize(Function):
    def forward(self, x, axes, eps):
        self.axes = axes
        mu = np.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = np.mean(centered * centered, axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = centered * self.inv_std
        return self.x_hat

    def backward(self, grad):
        mean_grad = np.mean(grad, axis=self.axes, keepdims=True)
        mean_proj = np.mean(grad * self.x_hat, axis=self.axes, keepdims=True)
        return (self.inv_std * (grad - mean_grad - self.x_hat * mean_proj),)


def channel_axis(ndim: int) -> int:
    return 1 if ndim >= 2 else 0


def normalization_axes(kind: str, ndim: int) -> Tuple[int, ...]:
    """Axes reduced by each normalization kind on channel-first data."""
    if kind == "layer":
        return (channel_axis(ndim),)
    if kind == "instance":
        if ndim < 3:
            raise ShapeError(f"instance normalization needs (B, C, ...) with a spatial axis, got rank {ndim}")
        return tuple(range(2, ndim))
    if kind == "batch":
        if ndim < 2:
            raise ShapeError(f"batch normalization needs (B, C, ...), got rank {ndim}")
        return (0,) + tuple(range(2, ndim))
    raise ShapeError(f"unknown normalization kind {kind!r}")


def affine_view(param, ndim: int) -> Tensor:
    """Reshape a per-channel vector so it broadcasts along the channel axis."""
    param = as_tensor(param)
    shape = [1] * ndim
    shape[channel_axis(ndim)] = param.shape[0]
    return reshape(param, shape)


def normalize(x, kind: str, eps: float = 1e-5, gamma=None, beta=None) -> Tensor:
    """
    Standardize `x` to zero mean and unit variance over the axes of `kind`
    (layer: channels; instance: spatial/token positions; batch: batch and
    positions), then apply the optional per-channel affine.
    """
    x = as_tensor(x)
    if eps <= 0:
        raise ConfigError(f"normalization eps must be positive, got {eps}")
    axes = normalization_axes(kind, x.ndim)
    if any(x.shape[a] < 1 for a in axes):
        raise ShapeError(f"normalized extent is empty for shape {x.shape}")
    out = _Standardize.apply(x, axes=axes, eps=eps)
    if gamma is not None:
        out = out * affine_view(gamma, x.ndim)
    if beta is not None:
        out = out + affine_view(beta, x.ndim)
    return out


# Activations

class _Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class _Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class _Gelu(Function):
    def forward(self, x):
        self.x = x
        self.cdf = special.ndtr(x)
        return x * self.cdf

    def backward(self, grad):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * self.x * self.x)
        return (grad * (self.cdf + self.x * pdf),)


class _Sigmoid(Function):
    def forward(self, x):
        self.out = special.expit(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class _Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, grad):
        return (grad * special.expit(self.x),)


_ACTIVATIONS = {
    "relu": _Relu,
    "tanh": _Tanh,
    "gelu": _Gelu,
    "sigmoid": _Sigmoid,
    "softplus": _Softplus,
}


def activation(x, kind: str) -> Tensor:
    """Elementwise nonlinearity; gelu is the exact x * Phi(x) form."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn.apply(x)


def relu(x) -> Tensor:
    return _Relu.apply(x)


def tanh(x) -> Tensor:
    return _Tanh.apply(x)


def gelu(x) -> Tensor:
    return _Gelu.apply(x)


def sigmoid(x) -> Tensor:
    return _Sigmoid.apply(x)


def softplus(x) -> Tensor:
    return _Softplus.apply(x)


# Loss

class _BinaryCrossEntropyWithLogits(Function):
    def forward(self, logits, targets):
        self.logits, self.targets = logits, targets
        losses = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
        return np.mean(losses)

    def backward(self, grad):
        scale = grad / self.logits.size
        return (scale * (special.expit(self.logits) - self.targets), None)


def binary_cross_entropy_with_logits(logits, targets) -> Tensor:
    """Mean of softplus(-z) over positives and softplus(z) over negatives."""
    logits = as_tensor(logits)
    targets = Tensor(np.asarray(targets), dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} differ")
    return _BinaryCrossEntropyWithLogits.apply(logits, targets)
