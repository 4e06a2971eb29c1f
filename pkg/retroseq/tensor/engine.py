"""This module implements a dense tensor with reverse-mode automatic differentiation.

Every operation on a :obj:`Tensor` that requires gradients records a closure
on the tensor it produces. Calling :meth:`Tensor.backward` walks the recorded
graph in reverse topological order and accumulates gradients into the leaf
tensors.

Tensors are created in 32-bit precision unless a :func:`precision` block is
active. The 64-bit mode exists for finite-difference gradient checks. The
modes set by the context managers apply to the current thread only.
"""
from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Iterator, Mapping, Sequence
from typing import Any, Union

import numpy as np

from retroseq.util import RetroSeqError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class _Modes(threading.local):
    """Per-thread precision, recording and checking modes."""

    dtype = np.dtype(np.float32)
    grad_enabled = True
    checked = False


_modes = _Modes()


class ShapeError(RetroSeqError, ValueError):
    """Raised when tensor shapes are incompatible."""


class NonFiniteError(RetroSeqError, FloatingPointError):
    """Raised in checked mode when an operation produces NaN or Inf."""


@contextlib.contextmanager
def precision(dtype: Any = np.float64) -> Iterator[None]:
    """Context manager that changes the dtype of newly created tensors.

    Args:
        dtype: ``numpy.float32`` or ``numpy.float64``.
    """
    previous = _modes.dtype
    _modes.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _modes.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Context manager that disables recording of operations."""
    previous = _modes.grad_enabled
    _modes.grad_enabled = False
    try:
        yield
    finally:
        _modes.grad_enabled = previous


@contextlib.contextmanager
def checked_mode() -> Iterator[None]:
    """Context manager that raises :obj:`NonFiniteError` on NaN or Inf values."""
    previous = _modes.checked
    _modes.checked = True
    try:
        yield
    finally:
        _modes.checked = previous


def get_default_dtype() -> np.dtype:
    """Gets the dtype used for newly created tensors."""
    return _modes.dtype


class Tensor:
    """A dense n-dimensional value taking part in the gradient tape.

    Args:
        data: The values. Converted to the current default dtype.
        requires_grad: Whether gradients should be accumulated into
            :attr:`grad` when :meth:`backward` is called.
        name: Optional name, used by parameter registries and error messages.

    Attributes:
        data: The values as a row-major :class:`numpy.ndarray`.
        grad: The accumulated gradient, same shape as :attr:`data`, or
            ``None`` if no gradient has been accumulated.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=_modes.dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        if _modes.checked:
            _check_finite(self.data, "tensor creation")

    def __repr__(self):
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{name})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Gets a copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        """Gets a tensor sharing the values but not the tape."""
        return _wrap(self.data)

    def zero_grad(self):
        self.grad = None

    # arithmetic --------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other, self.dtype)
        return _record(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other, self.dtype)
        return _record(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
            "sub",
        )

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other, self.dtype)
        return _record(
            self.data * other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other, self.dtype)
        return _record(
            self.data / other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other: ArrayLike) -> Tensor:
        return _as_tensor(other, self.dtype) / self

    def __neg__(self) -> Tensor:
        return _record(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        return _record(
            self.data**exponent,
            (self,),
            lambda g: (g * exponent * self.data ** (exponent - 1),),
            "pow",
        )

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            return (full,)

        return _record(self.data[index], (self,), backward, "getitem")

    # reductions --------------------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return _record(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # elementwise functions ---------------------------------------------------

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return _record(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> Tensor:
        return _record(np.log(self.data), (self,), lambda g: (g / self.data,), "log")

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        return _record(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return _record(out, (self,), lambda g: (g * (1 - out * out),), "tanh")

    def sigmoid(self) -> Tensor:
        out = 1.0 / (1.0 + np.exp(-self.data))
        return _record(out, (self,), lambda g: (g * out * (1 - out),), "sigmoid")

    def relu(self) -> Tensor:
        active = self.data > 0
        return _record(self.data * active, (self,), lambda g: (g * active,), "relu")

    def softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        out = exp / exp.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return _record(out, (self,), backward, "softmax")

    def log_softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - log_norm

        def backward(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

        return _record(out, (self,), backward, "log_softmax")

    def masked_fill(self, mask: np.ndarray, value: float) -> Tensor:
        """Replaces the entries where ``mask`` is true by a constant.

        The replaced entries do not depend on the input, so perturbing them
        changes nothing downstream.
        """
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), self.shape)
        out = np.where(mask, np.asarray(value, dtype=self.dtype), self.data)
        return _record(out, (self,), lambda g: (np.where(mask, 0, g),), "masked_fill")

    # shape manipulation ------------------------------------------------------

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}") from exc
        return _record(out, (self,), lambda g: (g.reshape(self.shape),), "reshape")

    def swapaxes(self, axis1: int, axis2: int) -> Tensor:
        return _record(
            np.swapaxes(self.data, axis1, axis2),
            (self,),
            lambda g: (np.swapaxes(g, axis1, axis2),),
            "swapaxes",
        )

    @property
    def T(self) -> Tensor:
        return self.swapaxes(-1, -2)

    # differentiation ---------------------------------------------------------

    def backward(self, gradient: np.ndarray | None = None):
        """Accumulates the gradient of this tensor into every reachable leaf.

        Args:
            gradient: The upstream gradient. Defaults to ones, which requires
                this tensor to be a scalar.
        """
        if gradient is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() without a gradient needs a scalar, got shape {self.shape}"
                )
            gradient = np.ones_like(self.data)

        grads: dict[int, np.ndarray] = {id(self): np.asarray(gradient, dtype=self.dtype)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad


def _wrap(data: np.ndarray) -> Tensor:
    tensor = Tensor.__new__(Tensor)
    tensor.data = data
    tensor.requires_grad = False
    tensor.name = None
    tensor.grad = None
    tensor._parents = ()
    tensor._backward = None
    return tensor


def _as_tensor(value: ArrayLike, dtype: np.dtype | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return _wrap(np.asarray(value, dtype=dtype or _modes.dtype))


def _record(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    if _modes.checked:
        _check_finite(data, op)
    out = _wrap(np.asarray(data))
    if _modes.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def tensor(data: ArrayLike, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Creates a tensor in the current default precision."""
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(*shape: int) -> Tensor:
    return _wrap(np.zeros(shape, dtype=_modes.dtype))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of the last two axes, broadcasting any leading axes.

    Args:
        a: A tensor with at least two axes.
        b: A tensor with at least two axes.

    Returns:
        The product, recorded on the tape when either input requires
        gradients.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return (
            _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
        )

    return _record(out, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenates tensors along an existing axis."""
    if not tensors:
        raise ShapeError("cannot concatenate an empty sequence")
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stacks same-shape tensors along a new axis."""
    return concat([_as_tensor(t).reshape(_insert_axis(t.shape, axis)) for t in tensors], axis)


def _insert_axis(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    axis = axis if axis >= 0 else len(shape) + axis + 1
    return shape[:axis] + (1,) + shape[axis:]


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or when ``rate == 0``."""
    if not training or rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gets the gradient of a scalar loss with respect to named parameters.

    Args:
        loss: A scalar tensor computed from the parameters.
        params: The parameters, keyed by name.

    Returns:
        The gradient of each parameter. Parameters the loss does not depend on
        map to zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    for param in params.values():
        param.grad = None
    loss.backward()
    return {
        name: param.grad if param.grad is not None else np.zeros_like(param.data)
        for name, param in params.items()
    }
