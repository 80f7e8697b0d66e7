"""
Dense Tensors with Reverse-Mode Automatic Differentiation
numpy-backed, 64-bit floats throughout
"""

import logging
import threading
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from engine.python.errors import CongruenceError, ContractError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], float, int]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Graphs are confined to the thread that builds them
_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


class no_grad:
    """Context manager that stops graph recording in the current thread"""

    def __enter__(self):
        self._previous = is_grad_enabled()
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._previous
        return False


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    n-dimensional float64 array that records the operations applied to it

    Leaves created with requires_grad=True collect dLoss/dLeaf in `grad`
    after `backward()` is called on a scalar result.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericError(f"Tensor '{name or '?'}' created from non-finite data")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[GradFn] = None

    # ------------------------------------------------------------------ basics

    @classmethod
    def _result(cls, data: np.ndarray, parents: Tuple["Tensor", ...], grad_fn: GradFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._grad_fn = grad_fn if out.requires_grad else None
        return out

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False, name: str = "") -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad, name=name)

    @classmethod
    def ones(cls, *shape: int, requires_grad: bool = False, name: str = "") -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, layer: str) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError("Non-finite intermediate value", layer=layer)
        return self

    def flatten(self) -> "Tensor":
        return self.reshape(-1)

    def __repr__(self):
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad_flag})"

    # -------------------------------------------------------------- arithmetic

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def grad_fn(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._result(self.data + other.data, (self, other), grad_fn)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def grad_fn(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._result(self.data - other.data, (self, other), grad_fn)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def grad_fn(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._result(a * b, (self, other), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def grad_fn(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._result(a / b, (self, other), grad_fn)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ContractError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise CongruenceError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

        def grad_fn(g):
            if b.ndim == 2:
                # weight matrix shared across leading (batch/time) axes
                grad_a = g @ b.T
                grad_b = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                return grad_a, grad_b
            grad_a = np.matmul(g, np.swapaxes(b, -1, -2))
            grad_b = np.matmul(np.swapaxes(a, -1, -2), g)
            return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

        return Tensor._result(np.matmul(a, b), (self, other), grad_fn)

    # ------------------------------------------------------------ elementwise

    def sigmoid(self) -> "Tensor":
        out_data = expit(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * out_data * (1.0 - out_data),))

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * (1.0 - out_data * out_data),))

    def square(self) -> "Tensor":
        a = self.data
        return Tensor._result(a * a, (self,), lambda g: (2.0 * a * g,))

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - np.max(self.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e / np.sum(e, axis=axis, keepdims=True)

        def grad_fn(g):
            return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

        return Tensor._result(s, (self,), grad_fn)

    # ------------------------------------------------------------- reductions

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        in_shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, in_shape).copy(),)

        return Tensor._result(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), grad_fn)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # --------------------------------------------------------------- reshaping

    def reshape(self, *shape: int) -> "Tensor":
        in_shape = self.shape
        return Tensor._result(self.data.reshape(*shape), (self,), lambda g: (g.reshape(in_shape),))

    def transpose(self, *axes: int) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),))

    def __getitem__(self, index) -> "Tensor":
        in_shape = self.shape

        def grad_fn(g):
            full = np.zeros(in_shape)
            full[index] = g
            return (full,)

        return Tensor._result(self.data[index], (self,), grad_fn)

    # ---------------------------------------------------------------- autodiff

    def backward(self) -> None:
        """
        Populate `grad` on every reachable leaf that requires grad

        The recorded graph is consumed: intermediate results drop their
        references to parents once their gradient has been propagated.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._grad_fn(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
            node._parents = ()
            node._grad_fn = None


def _topological_order(root: Tensor) -> List[Tensor]:
    """Parents-before-children order of the graph feeding `root`"""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product of two tensors of identical shape"""
    if a.shape != b.shape:
        raise CongruenceError(f"Hadamard product needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def grad_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    floor: float = 1e-5,
) -> List[float]:
    """
    Compare reverse-mode gradients against central finite differences

    Args:
        loss_fn: Rebuilds the scalar loss from the current parameter values
        params: Leaf tensors with requires_grad=True
        h: Finite-difference step
        floor: Lower bound on the relative-error denominator

    Returns:
        Maximum relative error per parameter tensor
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn().backward()

    errors = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                up = loss_fn().item()
                flat[i] = original - h
                down = loss_fn().item()
                flat[i] = original
                numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        errors.append(float(np.max(np.abs(analytic - numeric) / denom)))
    logger.debug(f"Gradient check over {len(params)} tensors, worst relative error {max(errors, default=0.0):.2e}")
    return errors
