"""Dense float64 tensors with reverse-mode gradients on an explicit tape.

Kept deliberately small: just the primitives the encoder, the attention
layers and the skip-gram loss need. Forward values are plain numpy arrays;
when a Tape is active every primitive appends a record holding its inputs
and a local-gradient closure. ``Tape.backward`` replays the records in
reverse, so records are visited exactly once and in reverse topological
order (execution order is already topological).

Gradients accumulate into ``Tensor.grad``. Calling backward twice on the
same tape without ``zero_grads`` doubles them; with ``zero_grads`` in
between the two passes agree exactly.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""


_checked = False


def set_checked(flag: bool) -> None:
    """Enable per-primitive finiteness assertions (slow, for tests)."""
    global _checked
    _checked = bool(flag)


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def grad_or_zero(self) -> np.ndarray:
        """Gradient of this tensor, zeros if it never received one."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; only one tape may be active at a time.
    """

    current: Optional["Tape"] = None

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        if Tape.current is not None:
            raise RuntimeError("a tape is already active")
        Tape.current = self
        return self

    def __exit__(self, *exc):
        Tape.current = None
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...],
               backward: Callable[[np.ndarray], None]) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(input) into every recorded tensor."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        _acc(loss, np.ones_like(loss.data))
        for out, _inputs, back in reversed(self.records):
            if out.grad is None:
                continue  # branch not reachable from the loss
            back(out.grad)

    def zero_grads(self) -> None:
        for out, inputs, _back in self.records:
            out.grad = None
            for t in inputs:
                t.grad = None


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data: np.ndarray, inputs: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    if _checked and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in checked mode")
    out = Tensor(data)
    if Tape.current is not None:
        Tape.current.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def back(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, -_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _acc(a, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    data = a.data * b.data

    def back(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), back)


def cmul(a: Tensor, const) -> Tensor:
    """Product with a non-differentiable constant (masks, 1/counts...)."""
    const = np.asarray(const, dtype=np.float64)
    data = a.data * const

    def back(g):
        _acc(a, _unbroadcast(g * const, a.data.shape))

    return _make(data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def back(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _make(data, (a, b), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def back(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _acc(p, g[tuple(idx)])
            offset += n

    return _make(data, tuple(parts), back)


def tsum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(ge, a.data.shape).copy())

    return _make(data, (a,), back)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def back(g):
        if axis is None:
            _acc(a, np.broadcast_to(g / n, a.data.shape).copy())
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape).copy())

    return _make(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.maximum(x, 0))),
                    np.exp(np.minimum(x, 0)) / (1.0 + np.exp(np.minimum(x, 0))))

    def back(g):
        _acc(a, g * data * (1.0 - data))

    return _make(data, (a,), back)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow for large |x|."""
    x = a.data
    data = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))

    def back(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x); both branches overflow-safe
        sig_neg = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
                           1.0 / (1.0 + np.exp(np.minimum(x, 0.0))))
        _acc(a, g * sig_neg)

    return _make(data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back(g):
        _acc(a, g * (1.0 - data * data))

    return _make(data, (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    data = np.where(a.data > 0, a.data, slope * a.data)

    def back(g):
        _acc(a, g * np.where(a.data > 0, 1.0, slope))

    return _make(data, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _acc(a, data * (g - dot))

    return _make(data, (a,), back)


def masked_softmax(a: Tensor, mask) -> Tensor:
    """Rowwise softmax restricted to mask==1 entries; all-masked rows give 0."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.data.shape:
        raise DimensionError(f"mask shape {mask.shape} != logits shape {a.data.shape}")
    neg_fill = np.where(mask > 0, a.data, -np.inf)
    rowmax = neg_fill.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(a.data - rowmax) * mask
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    data = e / safe

    def back(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _acc(a, data * (g - dot))

    return _make(data, (a,), back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError(f"dot needs equal-length vectors: {a.data.shape} vs {b.data.shape}")
    data = np.asarray(a.data @ b.data)

    def back(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(data, (a, b), back)


def l2_norm(a: Tensor) -> Tensor:
    data = np.asarray(np.sqrt((a.data * a.data).sum()))

    def back(g):
        if data == 0:
            _acc(a, np.zeros_like(a.data))
        else:
            _acc(a, g * a.data / data)

    return _make(data, (a,), back)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows a[idx]; backward scatter-adds into the source rows."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _make(data, (a,), back)


def take_col(a: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor as an (N, 1) tensor."""
    data = a.data[:, j:j + 1]

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[:, j:j + 1] += g

    return _make(data, (a,), back)


def vslice(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    data = a.data[start:stop]

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[start:stop] += g

    return _make(data, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def back(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(data, (a,), back)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar function of ``point`` built from the
    primitives above. Relative error per coordinate is
    |analytic - fd| / max(1, |fd|).
    """
    with Tape() as tape:
        loss = f(point)
        tape.backward(loss)
    analytic = point.grad_or_zero().copy()

    flat = point.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = float(f(point).data)
        flat[i] = keep - h
        down = float(f(point).data)
        flat[i] = keep
        fd = (up - down) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


def grad_check_params(f: Callable[[], Tensor], params: dict[str, Tensor],
                      h: float = 1e-5) -> float:
    """grad_check over a whole parameter set; f closes over the params."""
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = {k: t.grad_or_zero().copy() for k, t in params.items()}

    worst = 0.0
    for k, t in params.items():
        flat = t.data.reshape(-1)
        ana = analytic[k].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f().data)
            flat[i] = keep - h
            down = float(f().data)
            flat[i] = keep
            fd = (up - down) / (2.0 * h)
            err = abs(ana[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
