"""Dense float64 tensors with a minimal reverse-mode tape.

Everything is either a scalar (shape ()) or a 2-D matrix. Ops compute
eagerly with numpy and, when a Tape is active and some input requires a
gradient, push a backward closure onto it. Broadcasting is restricted to
two patterns: a 1xD row (add/mul) and an Ex1 column (scale_rows).
"""

from __future__ import annotations

import threading

import numpy as np

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; replayed once, in reverse, by backward()."""

    def __init__(self):
        self._nodes = []  # (output tensor, pull closure)
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class Tensor:
    """Row-major float64 value, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim not in (0, 2):
            raise ValueError(f"tensors are scalars or matrices, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _emit(data: np.ndarray, inputs, pull) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if out.requires_grad and tape is not None:
        out._tape = tape
        tape._nodes.append((out, pull))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not recorded on a tape")
    if tape._spent:
        raise RuntimeError("tape already consumed; re-run the forward pass")
    tape._spent = True
    loss.grad = np.ones(())
    for out, pull in reversed(tape._nodes):
        if out.grad is not None:
            pull(out.grad)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def pull(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _emit(data, (a, b), pull)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias row broadcast over rows."""
    return add(matmul(x, w), b)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if slope < 0:
        raise ValueError(f"negative slope {slope}")
    factor = np.where(x.data >= 0, 1.0, slope)  # subgradient 1 at the kink
    data = x.data * factor

    def pull(g):
        _accumulate(x, g * factor)

    return _emit(data, (x,), pull)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a 1xD row broadcast over a's rows."""
    row_broadcast = (
        a.data.ndim == 2 and b.data.ndim == 2
        and b.shape[0] == 1 and a.shape[1] == b.shape[1] and a.shape[0] != 1
    )
    if not row_broadcast and a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    data = a.data + b.data

    def pull(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=0, keepdims=True) if row_broadcast else g)

    return _emit(data, (a, b), pull)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a 1xD row broadcast over a's rows."""
    row_broadcast = (
        a.data.ndim == 2 and b.data.ndim == 2
        and b.shape[0] == 1 and a.shape[1] == b.shape[1] and a.shape[0] != 1
    )
    if not row_broadcast and a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    data = a.data * b.data

    def pull(g):
        _accumulate(a, g * b.data)
        gb = g * a.data
        _accumulate(b, gb.sum(axis=0, keepdims=True) if row_broadcast else gb)

    return _emit(data, (a, b), pull)


def scale_rows(a: Tensor, col: Tensor) -> Tensor:
    """Scale each row of a [ExD] by the matching entry of an Ex1 column."""
    if a.data.ndim != 2 or col.shape != (a.shape[0], 1):
        raise ValueError(f"scale_rows expects ({a.shape[0]}, 1) column, got {col.shape}")
    data = a.data * col.data

    def pull(g):
        _accumulate(a, g * col.data)
        _accumulate(col, (g * a.data).sum(axis=1, keepdims=True))

    return _emit(data, (a, col), pull)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * c

    def pull(g):
        _accumulate(x, g * c)

    return _emit(data, (x,), pull)


def gather_rows(t: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if t.data.ndim != 2:
        raise ValueError(f"gather_rows expects a matrix, got shape {t.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise ValueError(f"gather index out of range for {t.shape[0]} rows")
    data = t.data[idx]

    def pull(g):
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            np.add.at(buf, idx, g)  # duplicate indices accumulate
            _accumulate(t, buf)

    return _emit(data, (t,), pull)


def _check_segments(segment_of, num_rows: int, num_segments: int) -> np.ndarray:
    seg = np.asarray(segment_of, dtype=np.int64)
    if seg.shape != (num_rows,):
        raise ValueError(f"segment vector length {seg.shape} != row count {num_rows}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValueError(f"segment id out of range [0, {num_segments})")
    return seg


def segment_softmax(logits: Tensor, segment_of, num_segments: int) -> Tensor:
    """Per-segment, per-column softmax over contiguous row groups."""
    seg = _check_segments(segment_of, logits.shape[0], num_segments)
    if seg.size and np.any(np.diff(seg) < 0):
        raise ValueError("segment ids must be grouped contiguously (non-decreasing)")
    x = logits.data
    high = np.full((num_segments, x.shape[1]), -np.inf)
    np.maximum.at(high, seg, x)
    e = np.exp(x - high[seg])  # max-subtraction keeps exp bounded
    z = np.zeros((num_segments, x.shape[1]))
    np.add.at(z, seg, e)
    y = e / z[seg]

    def pull(g):
        dot = np.zeros((num_segments, x.shape[1]))
        np.add.at(dot, seg, y * g)
        _accumulate(logits, y * (g - dot[seg]))

    return _emit(y, (logits,), pull)


def segment_reduce(values: Tensor, segment_of, num_segments: int, mode: str) -> Tensor:
    """Reduce row groups to one row per segment; empty segments give zeros."""
    seg = _check_segments(segment_of, values.shape[0], num_segments)
    x = values.data
    cols = x.shape[1]
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)

    if mode in ("sum", "mean"):
        out = np.zeros((num_segments, cols))
        np.add.at(out, seg, x)
        if mode == "mean":
            nz = counts > 0
            out[nz] /= counts[nz, None]

        def pull(g):
            gg = g[seg]
            if mode == "mean":
                gg = gg / counts[seg, None]
            _accumulate(values, gg)

    elif mode == "max":
        high = np.full((num_segments, cols), -np.inf)
        np.maximum.at(high, seg, x)
        # first row index attaining the segment max, per column
        first = np.full((num_segments, cols), values.shape[0], dtype=np.int64)
        rows = np.arange(values.shape[0], dtype=np.int64)
        hit_r, hit_c = np.nonzero(x == high[seg])
        np.minimum.at(first, (seg[hit_r], hit_c), rows[hit_r])
        out = np.where(np.isfinite(high), high, 0.0)

        def pull(g):
            if not values.requires_grad:
                return
            buf = np.zeros_like(x)
            s_idx, c_idx = np.nonzero(first < values.shape[0])
            np.add.at(buf, (first[s_idx, c_idx], c_idx), g[s_idx, c_idx])
            _accumulate(values, buf)

    else:
        raise ValueError(f"unknown reduce mode {mode!r}")

    return _emit(out, (values,), pull)


def mean_over_columns(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"mean_over_columns expects a matrix, got {x.shape}")
    cols = x.shape[1]
    data = x.data.mean(axis=1, keepdims=True)

    def pull(g):
        _accumulate(x, np.repeat(g, cols, axis=1) / cols)

    return _emit(data, (x,), pull)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def pull(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    return _emit(data, (x,), pull)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive entry")
    data = np.log(x.data)

    def pull(g):
        _accumulate(x, g / x.data)

    return _emit(data, (x,), pull)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def pull(g):
        _accumulate(x, g * data)

    return _emit(data, (x,), pull)


def sigmoid(x: Tensor) -> Tensor:
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def pull(g):
        _accumulate(x, g * data * (1.0 - data))

    return _emit(data, (x,), pull)


def reciprocal(x: Tensor) -> Tensor:
    if np.any(x.data == 0):
        raise ValueError("reciprocal of zero entry")
    data = 1.0 / x.data

    def pull(g):
        _accumulate(x, -g / (x.data * x.data))

    return _emit(data, (x,), pull)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    if data.ndim not in (0, 2):
        raise ValueError(f"reshape target must be scalar or matrix, got {shape}")

    def pull(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _emit(data, (x,), pull)


# ---------------------------------------------------------------------------
# gradient checking


def _rel_err(g: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
    return float(np.max(np.abs(g - fd) / denom)) if g.size else 0.0


def finite_diff_check(f, x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between the tape gradient of f(x) and central differences."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x.grad = None
    with Tape():
        y = f(x)
    if y.shape != ():
        raise ValueError("f must return a scalar")
    if not np.isfinite(y.data):
        raise ValueError("f returned a non-finite value")
    backward(y)
    g = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    fd = np.zeros_like(x.data)
    for idx in np.ndindex(x.data.shape):
        orig = x.data[idx]
        x.data[idx] = orig + h
        hi = float(f(x).data)
        x.data[idx] = orig - h
        lo = float(f(x).data)
        x.data[idx] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("f returned a non-finite value during differencing")
        fd[idx] = (hi - lo) / (2.0 * h)
    return _rel_err(g, fd)


def finite_diff_check_params(loss_fn, params, h: float = 1e-6) -> float:
    """finite_diff_check generalized to a list of named parameter tensors.

    loss_fn takes no arguments and rebuilds the scalar loss from the current
    parameter values, so the central differences probe the same computation
    the tape differentiates.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        p.grad = None
    with Tape():
        y = loss_fn()
    if not np.isfinite(y.data):
        raise ValueError("loss is non-finite")
    backward(y)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, g in zip(params, grads):
        fd = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            hi = float(loss_fn().data)
            p.data[idx] = orig - h
            lo = float(loss_fn().data)
            p.data[idx] = orig
            fd[idx] = (hi - lo) / (2.0 * h)
        worst = max(worst, _rel_err(g, fd))
    return worst
