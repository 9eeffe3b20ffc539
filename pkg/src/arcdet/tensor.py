"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops executed while a :class:`Tape` is active are recorded only when at least
one input requires a gradient, so computation that touches nothing but frozen
parameters never appears on the tape and never receives gradient storage.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named tensor with a frozen flag. Frozen parameters never get gradients."""

    __slots__ = ("name", "tensor", "_frozen")

    def __init__(self, name: str, values, frozen: bool = False):
        self.name = name
        self.tensor = Tensor(values, requires_grad=not frozen)
        self._frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.tensor.requires_grad = not self._frozen
        if self._frozen:
            self.tensor.grad = None

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of executed ops; creation order is a topological order."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def custom_op(values: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result and record it on the active tape when needed.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    parent, in order.
    """
    out = Tensor(values)
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, tuple(parents), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    if loss.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.nodes or not loss.requires_grad:
        raise GradientError("nothing recorded for this loss; run the forward pass under the tape first")
    if tape.nodes[-1][0] is not loss and not any(node[0] is loss for node in tape.nodes):
        raise GradientError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    produced = {id(out) for out, _, _ in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _as_tensor(x) -> Tensor:
    return x.tensor if isinstance(x, Parameter) else x


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding. x: N×Cin×H×W, weight: Cout×Cin×k×k."""
    weight, bias = _as_tensor(weight), _as_tensor(bias)
    if x.values.ndim != 4 or weight.values.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if kh != kw or kh < 1:
        raise ShapeError(f"conv2d needs a square kernel, got {kh}×{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0")
    k = kh
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d output extent is not a positive integer for H={h}, W={w}, k={k}, "
            f"stride={stride}, padding={padding}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.values
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows: (n, ho, wo); cols: (cin, ki, kj)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = weight.values.reshape(cout, cin * k * k)
    out = (cols @ wmat.T + bias.values).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def _backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return custom_op(np.ascontiguousarray(out), (x, weight, bias), _backward)


def _check_pool_input(x: Tensor) -> None:
    if x.values.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"pooling expects N×C×H×W with H, W >= 1, got {x.shape}")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_pool_input(x)
    n, c, h, w = x.shape
    out = x.values.mean(axis=(2, 3), keepdims=True)

    def _backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return custom_op(out, (x,), _backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-plane maximum; the gradient goes to the first maximal element in row-major order."""
    _check_pool_input(x)
    n, c, h, w = x.shape
    flat = x.values.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)

    def _backward(g):
        gx = np.zeros((n, c, h * w))
        np.put_along_axis(gx, idx[:, :, None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(x.shape),)

    return custom_op(out, (x,), _backward)


def linear(x: Tensor, weight, bias) -> Tensor:
    """Affine map x @ weight.T + bias. x: N×Cin, weight: Cout×Cin."""
    weight, bias = _as_tensor(weight), _as_tensor(bias)
    if x.values.ndim != 2 or weight.values.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.values @ weight.values.T + bias.values

    def _backward(g):
        gx = g @ weight.values if x.requires_grad else None
        gw = g.T @ x.values if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return custom_op(out, (x, weight, bias), _backward)


_TINY = np.finfo(DTYPE).tiny
_ONE_MINUS = 1.0 - np.finfo(DTYPE).epsneg


def sigmoid_values(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic, clamped to the open interval (0, 1)."""
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _TINY, _ONE_MINUS)


def _sigmoid_backward(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * s * (1.0 - s)


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_values(x.values)
    return custom_op(s, (x,), lambda g: (_sigmoid_backward(s, g),))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    # np.where keeps clipped entries at +0.0 rather than -0.0
    return custom_op(np.where(mask, x.values, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


def _broadcast_axes(a_shape, b_shape) -> tuple[int, ...]:
    if len(a_shape) != len(b_shape):
        raise ShapeError(f"cannot broadcast {b_shape} against {a_shape}")
    axes = []
    for i, (da, db) in enumerate(zip(a_shape, b_shape)):
        if da == db:
            continue
        if db != 1:
            raise ShapeError(f"cannot broadcast {b_shape} against {a_shape}")
        axes.append(i)
    return tuple(axes)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; ``b`` may have singleton axes that broadcast over ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    axes = _broadcast_axes(a.shape, b.shape)
    out = a.values * b.values

    def _backward(g):
        ga = g * b.values if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.values
            if axes:
                gb = gb.sum(axis=axes, keepdims=True)
        return ga, gb

    return custom_op(out, (a, b), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return custom_op(a.values + b.values, (a, b), lambda g: (g, g))


def scale(a: Tensor, s) -> Tensor:
    """Multiply every element of ``a`` by the single-element tensor ``s``."""
    a, s = _as_tensor(a), _as_tensor(s)
    if s.size != 1:
        raise ShapeError(f"scale factor must hold one element, got shape {s.shape}")
    factor = s.values.reshape(-1)[0]

    def _backward(g):
        ga = g * factor if a.requires_grad else None
        gs = np.full(s.shape, np.sum(g * a.values)) if s.requires_grad else None
        return ga, gs

    return custom_op(a.values * factor, (a, s), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return custom_op(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum_all(x: Tensor) -> Tensor:
    return custom_op(np.array(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) for a constant weight array; handy as a test functional."""
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.shape != x.shape:
        raise ShapeError(f"weights shape {weights.shape} differs from {x.shape}")
    return custom_op(np.array(np.sum(x.values * weights)), (x,), lambda g: (g * weights,))
