"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: row-major 64-bit arrays, explicit shapes,
and no broadcasting beyond scalar-vs-tensor. Operations executed while a
:class:`Tape` is active append a backward rule; :meth:`Tape.backward` replays
the rules in exact reverse construction order, accumulating gradients
additively into each participating tensor's ``grad`` buffer. Tensors created
outside any tape are constants and are safe to share across threads for
inference.

A tape is meant to live for a single optimization step and be discarded (or
``reset``) afterwards; there is no support for higher-order derivatives.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    ParameterError,
    PreconditionError,
)

LOG_CLAMP = 1e-7  # lower clamp applied to every log input; see `log`

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """A dense float64 array paired with a same-shape gradient buffer.

    ``data`` is always C-contiguous (row-major). ``grad`` starts at zero and
    is only written by backward passes; ``node_id`` is the tape position of
    the operation that produced this tensor, or ``None`` for constants and
    parameters.
    """

    __slots__ = ("data", "grad", "node_id", "_tape")

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad = np.zeros_like(self.data)
        self.node_id: int | None = None
        self._tape: "Tape | None" = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Adopt a freshly computed array without copying.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = np.zeros_like(arr)
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    # Operator sugar; Python scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class Tape:
    """Ordered record of differentiable operations.

    Construction order is preserved; backward replays rules strictly in
    reverse, which is a valid topological order because every operand must
    exist before the operation that consumes it.
    """

    def __init__(self):
        self._nodes: list[tuple[Callable[[], None], Tensor, tuple[Tensor, ...]]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(getattr(_state, "tape", None))
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tape = _state.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable[[], None]) -> None:
        out.node_id = len(self._nodes)
        out._tape = self
        self._nodes.append((backward_fn, out, inputs))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into every participating tensor's grad."""
        if loss.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad += 1.0
        for fn, _out, _inputs in reversed(self._nodes):
            fn()

    def _participants(self) -> list[Tensor]:
        unique: dict[int, Tensor] = {}
        for _fn, out, inputs in self._nodes:
            unique[id(out)] = out
            for t in inputs:
                unique[id(t)] = t
        return list(unique.values())

    def zero_grads(self) -> None:
        for t in self._participants():
            t.grad[...] = 0.0

    def reset(self) -> None:
        """Zero every participating gradient and forget all recorded operations."""
        self.zero_grads()
        self._nodes.clear()

    def __len__(self) -> int:
        return len(self._nodes)


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that produced ``loss``.

    A constant scalar (no tape) is accepted and leaves all other gradients
    untouched.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        loss.grad += 1.0
        return
    loss._tape.backward(loss)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _accumulate(t: Tensor, contrib: np.ndarray) -> None:
    # Scalar operands absorb the summed contribution of the broadcast.
    if t.data.shape == contrib.shape:
        t.grad += contrib
    else:
        t.grad += contrib.sum()


def _check_binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; backward is dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data)
    if _active_tape() is None:
        return out

    def fn():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    return _record(out, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused affine map ``x @ weightᵀ + bias`` for 2-D ``x`` [N×in].

    ``weight`` is [out×in] and ``bias`` is a 1-D [out] vector added to every
    row. One tape node instead of three keeps training-step overhead down.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"linear requires a 2-D input, got {x.shape}")
    if weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.data.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    out = Tensor._wrap(x.data @ weight.data.T + bias.data)
    if _active_tape() is None:
        return out

    def fn():
        g = out.grad
        x.grad += g @ weight.data
        weight.grad += g.T @ x.data
        bias.grad += g.sum(axis=0)

    return _record(out, (x, weight, bias), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    if _active_tape() is None:
        return out

    def fn():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    return _record(out, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    if _active_tape() is None:
        return out

    def fn():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    return _record(out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    if _active_tape() is None:
        return out

    def fn():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    return _record(out, (a, b), fn)


def neg(x: Tensor) -> Tensor:
    out = Tensor._wrap(-x.data)
    if _active_tape() is None:
        return out

    def fn():
        x.grad -= out.grad

    return _record(out, (x,), fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant without materializing a constant tensor."""
    c = float(c)
    out = Tensor._wrap(x.data * c)
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad * c

    return _record(out, (x,), fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor._wrap(y)
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad * (1.0 - y * y)

    return _record(out, (x,), fn)


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument never overflows.
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor._wrap(y)
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad * (y * (1.0 - y))

    return _record(out, (x,), fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0.0))
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad * (x.data > 0.0)

    return _record(out, (x,), fn)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor._wrap(y)
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad * y

    return _record(out, (x,), fn)


def log(x: Tensor) -> Tensor:
    """Natural log of ``max(x, 1e-7)``.

    Sigmoid hazards can saturate at 0, so inputs are clamped before the log;
    the gradient is exactly that of the clamped function (zero on the flat
    region). Inputs that remain non-positive after clamping (NaN) are a
    domain error.
    """
    clamped = np.maximum(x.data, LOG_CLAMP)
    if not np.all(clamped > 0.0):
        raise DomainError("log input is not positive after clamping (NaN operand)")
    out = Tensor._wrap(np.log(clamped))
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad * ((x.data > LOG_CLAMP) / clamped)

    return _record(out, (x,), fn)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax of a 1-D tensor: positive entries summing to one."""
    if x.data.ndim != 1:
        raise DimensionError(f"softmax requires a 1-D input, got shape {x.shape}")
    if x.size == 0:
        raise PreconditionError("softmax on an empty tensor")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    y = e / e.sum()
    out = Tensor._wrap(y)
    if _active_tape() is None:
        return out

    def fn():
        g = out.grad
        x.grad += y * (g - np.dot(g, y))

    return _record(out, (x,), fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy's naming
    out = Tensor._wrap(np.asarray(x.data.sum()))
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad

    return _record(out, (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape))
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad.reshape(x.data.shape)

    return _record(out, (x,), fn)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors; backward slices the gradient back apart."""
    parts = list(parts)
    if not parts:
        raise PreconditionError("concat of zero tensors")
    for p in parts:
        if p.data.ndim != 1:
            raise DimensionError(f"concat requires 1-D parts, got shape {p.shape}")
    out = Tensor._wrap(np.concatenate([p.data for p in parts]))
    if _active_tape() is None:
        return out

    offsets = np.cumsum([0] + [p.size for p in parts])

    def fn():
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += out.grad[start:stop]

    return _record(out, tuple(parts), fn)


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    if x.data.ndim != 1:
        raise DimensionError(f"slice1d requires a 1-D input, got shape {x.shape}")
    if not 0 <= start <= stop <= x.size:
        raise PreconditionError(f"slice1d bounds [{start}:{stop}] invalid for size {x.size}")
    out = Tensor._wrap(x.data[start:stop].copy())
    if _active_tape() is None:
        return out

    def fn():
        x.grad[start:stop] += out.grad

    return _record(out, (x,), fn)


def pick(x: Tensor, index: int) -> Tensor:
    """Select one entry of a 1-D tensor as a scalar."""
    if x.data.ndim != 1:
        raise DimensionError(f"pick requires a 1-D input, got shape {x.shape}")
    if not 0 <= index < x.size:
        raise PreconditionError(f"pick index {index} out of range for size {x.size}")
    out = Tensor._wrap(np.asarray(x.data[index]))
    if _active_tape() is None:
        return out

    def fn():
        x.grad[index] += out.grad

    return _record(out, (x,), fn)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "neg": neg,
}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}; known: {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


def apply_unary(x: Tensor, value: np.ndarray, grad_multiplier: np.ndarray) -> Tensor:
    """Register a custom unary op from a precomputed value and d(out)/d(x) factor.

    Used by layers (SeLU, alpha dropout) to define activations without the
    engine knowing about them.
    """
    if value.shape != x.data.shape or grad_multiplier.shape != x.data.shape:
        raise DimensionError("apply_unary: value/grad shapes must match the input")
    out = Tensor._wrap(value)
    if _active_tape() is None:
        return out

    def fn():
        x.grad += out.grad * grad_multiplier

    return _record(out, (x,), fn)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` at ``x`` against central differences.

    Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    ``f`` must be deterministic and evaluable repeatedly at perturbed inputs.
    """
    if not 0.0 < eps <= 1e-3:
        raise ParameterError(f"grad_check eps must lie in (0, 1e-3], got {eps}")
    x.zero_grad()
    tape = Tape()
    with tape:
        y = f(x)
    tape.backward(y)
    analytic = x.grad.reshape(-1).copy()
    tape.reset()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
