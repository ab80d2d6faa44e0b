"""
Tensor value type and reverse-mode differentiation.

A Tensor wraps a numpy array. Operations are Function subclasses: `apply`
runs `forward` on raw arrays and, when any input needs gradients, records the
Function as the output's context so `backward` can walk the graph in reverse
topological order.
"""
import contextlib
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from hsvlt.core.errors import ShapeError

_SUPPORTED_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(name: str) -> None:
    """Switch between 64-bit verification mode and 32-bit training mode."""
    global _default_dtype
    if name not in _SUPPORTED_DTYPES:
        raise ValueError(f"precision must be one of {sorted(_SUPPORTED_DTYPES)}, got {name!r}")
    _default_dtype = _SUPPORTED_DTYPES[name]


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = np.dtype(_default_dtype).name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense real array with optional gradient tracking"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, ctx: Optional["Function"] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.ctx = ctx

    # Introspection
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Differentiation
    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.ctx is not None:
                for parent in node.ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(self)/d(leaf) into every reachable leaf with requires_grad.

        Without an explicit seed gradient the tensor must hold a single value.
        Repeated calls accumulate; call zero_grad on the leaves to reset.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if not self.requires_grad:
            return

        pending = {id(self): grad}
        for node in reversed(self._topological_order()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node.ctx is None:
                node.grad = np.array(node_grad, copy=True) if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node.ctx.backward(node_grad)
            for parent, parent_grad in zip(node.ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # Operators (implemented in hsvlt.core.ops)
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __pow__(self, exponent: float):
        return _ops.power(self, exponent)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops.transpose(self, axes or None)

    def exp(self):
        return _ops.exp(self)

    def log(self):
        return _ops.log(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward(*arrays, **options)` returning an array and
    `backward(grad)` returning one gradient (or None) per tensor input.
    """

    def __init__(self, *parents: Tensor):
        self.parents: Sequence[Tensor] = parents

    @classmethod
    def apply(cls, *inputs, **options) -> Tensor:
        tensors = [as_tensor(value) for value in inputs]
        ctx = cls(*tensors)
        out = np.asarray(ctx.forward(*[t.data for t in tensors], **options))
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, ctx=ctx if requires_grad else None, dtype=out.dtype)

    def forward(self, *arrays, **options) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError


from hsvlt.core import ops as _ops  # noqa: E402
