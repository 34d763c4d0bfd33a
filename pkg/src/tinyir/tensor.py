"""Dense 2-D arrays with tape-based reverse-mode differentiation.

Every value is a row-major matrix (scalars are [1x1], vectors [1xd]); numpy
supplies the arithmetic, this module supplies the tape. Recording order is a
topological order by construction, so backward is a single reverse sweep with
additive gradient accumulation. Masked logits use a large negative sentinel
instead of -inf so exp never produces NaN.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError

NEG_INF = -1e30
_MASK_THRESHOLD = -1e29  # values at or below this are treated as masked out


class Tensor:
    """A 2-D float array, optionally tracked on the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.grad is not None})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations; backward walks it once in reverse."""

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every tensor the loss depends on."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise NumericalError("loss was not recorded on this tape")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, back_fn in reversed(self._records):
            if out.grad is not None:
                back_fn(out.grad)


def current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    if loss.tape is None:
        raise NumericalError("loss has no recorded tape")
    loss.tape.backward(loss)


def _track(out: Tensor, parents: tuple[Tensor, ...], back_fn) -> Tensor:
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape = tape
        tape._records.append((out, back_fn))
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _track(out, (a, b), back)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Same shape, or b broadcast as a single row/single scalar.
    if a.shape == b.shape:
        return
    if b.shape == (1, a.shape[1]) or b.shape == (1, 1):
        return
    raise ShapeError(f"{op} mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, g.shape[1]):
        return g.sum(axis=0, keepdims=True)
    if shape == (1, 1):
        return g.sum(keepdims=True).reshape(1, 1)
    raise ShapeError(f"cannot reduce grad {g.shape} to {shape}")


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.shape))

    return _track(out, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-_reduce_to(g, b.shape))

    return _track(out, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.shape))

    return _track(out, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _track(out, (a,), back)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * out.data)

    return _track(out, (a,), back)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _track(out, (a,), back)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy())

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _track(out, (a,), back)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    ts = list(tensors)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[lo:hi, :] if axis == 0 else g[:, lo:hi])

    return _track(out, tuple(ts), back)


def slice2d(a: Tensor, rows: slice, cols: slice) -> Tensor:
    out = Tensor(a.data[rows, cols].copy())

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, cols] = g
            a.accumulate_grad(full)

    return _track(out, (a,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of table; backward scatter-adds into the gathered rows."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"ids must be a flat sequence, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def back(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table.accumulate_grad(full)

    return _track(out, (table,), back)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise x / sqrt(mean(x^2) + eps), scaled by a learned [1xd] gain."""
    if gain.shape != (1, x.shape[1]):
        raise ShapeError(f"gain must be (1, {x.shape[1]}), got {gain.shape}")
    d = x.shape[1]
    r = np.sqrt((x.data * x.data).mean(axis=1, keepdims=True) + eps)
    u = x.data / r
    out = Tensor(u * gain.data)

    def back(g):
        if x.requires_grad:
            gg = g * gain.data
            inner = (gg * x.data).sum(axis=1, keepdims=True)
            x.accumulate_grad(gg / r - x.data * inner / (d * r**3))
        if gain.requires_grad:
            gain.accumulate_grad((g * u).sum(axis=0, keepdims=True))

    return _track(out, (x, gain), back)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum().reshape(1, 1))

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g[0, 0]))

    return _track(out, (a,), back)


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean().reshape(1, 1))
    inv = 1.0 / a.data.size

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g[0, 0] * inv))

    return _track(out, (a,), back)


def sum_rows(a: Tensor) -> Tensor:
    """Row-wise sum, shape [n x 1]."""
    out = Tensor(a.data.sum(axis=1, keepdims=True))

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _track(out, (a,), back)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0. Train-time only by convention."""
    if not 0.0 <= p < 1.0:
        raise NumericalError(f"dropout p must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    out = Tensor(a.data * mask)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _track(out, (a,), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise exp-normalize with max subtraction; sentinel-masked entries
    come out exactly zero. A fully masked row is an error."""
    masked = x.data <= _MASK_THRESHOLD
    if masked.all(axis=1).any():
        raise NumericalError("softmax row is entirely masked")
    shifted = np.where(masked, 0.0, x.data - np.where(masked, -np.inf, x.data).max(axis=1, keepdims=True))
    e = np.exp(shifted)
    e[masked] = 0.0
    out = Tensor(e / e.sum(axis=1, keepdims=True))

    def back(g):
        if x.requires_grad:
            y = out.data
            inner = (g * y).sum(axis=1, keepdims=True)
            x.accumulate_grad(y * (g - inner))

    return _track(out, (x,), back)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated gelu."""
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    a = x.dtype.type(0.044715)
    inner = c * (x.data + a * x.data**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def back(g):
        if x.requires_grad:
            sech2 = 1.0 - t * t
            d = 0.5 * (1.0 + t) + 0.5 * x.data * sech2 * c * (1.0 + 3.0 * a * x.data**2)
            x.accumulate_grad(g * d)

    return _track(out, (x,), back)


def unit_rows(x: Tensor, eps: float = 0.0) -> Tensor:
    """Row-wise L2 normalization."""
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True)) + eps
    out = Tensor(x.data / norms)

    def back(g):
        if x.requires_grad:
            y = out.data
            inner = (g * y).sum(axis=1, keepdims=True)
            x.accumulate_grad((g - y * inner) / norms)

    return _track(out, (x,), back)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two equal-shape matrices, shape [n x 1]."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows mismatch: {a.shape} vs {b.shape}")
    return sum_rows(mul(unit_rows(a), unit_rows(b)))


def rotate_pairs(x: Tensor) -> Tensor:
    """Map each dimension pair (a, b) to (-b, a); the 90-degree block rotation
    used by rotary embeddings. Requires an even number of columns."""
    if x.shape[1] % 2:
        raise ShapeError(f"rotate_pairs needs even columns, got {x.shape}")
    d = x.data
    out_data = np.empty_like(d)
    out_data[:, 0::2] = -d[:, 1::2]
    out_data[:, 1::2] = d[:, 0::2]
    out = Tensor(out_data)

    def back(g):
        if x.requires_grad:
            gx = np.empty_like(g)
            gx[:, 1::2] = -g[:, 0::2]
            gx[:, 0::2] = g[:, 1::2]
            x.accumulate_grad(gx)

    return _track(out, (x,), back)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target column per row, stabilized via
    log-sum-exp. Sentinel-masked logits are excluded from the normalizer."""
    t = np.asarray(targets, dtype=np.intp)
    n = logits.shape[0]
    if t.shape != (n,):
        raise ShapeError(f"targets must have shape ({n},), got {t.shape}")
    masked = logits.data <= _MASK_THRESHOLD
    if masked.all(axis=1).any():
        raise NumericalError("cross_entropy row is entirely masked")
    if masked[np.arange(n), t].any():
        raise NumericalError("cross_entropy target column is masked")
    finite = np.where(masked, -np.inf, logits.data)
    m = finite.max(axis=1, keepdims=True)
    e = np.exp(np.where(masked, 0.0, logits.data - m))
    e[masked] = 0.0
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    nll = lse - logits.data[np.arange(n), t]
    out = Tensor(np.array(nll.mean()).reshape(1, 1))

    def back(g):
        if logits.requires_grad:
            p = e / z
            p[np.arange(n), t] -= 1.0
            logits.accumulate_grad(p * (g[0, 0] / n))

    return _track(out, (logits,), back)
