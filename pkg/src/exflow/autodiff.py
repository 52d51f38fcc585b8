"""Dense float64 tensors with a reverse-mode gradient tape.

The op set is deliberately restricted to what the flow and the latent
recursion need: same-shape elementwise arithmetic, 2-D matrix products,
row-vector broadcasts over matrices, a handful of nonlinearities, column
slicing/concatenation and ordered prefix sums. No general broadcasting.

Recording is controlled by a ``Tape`` used as a context manager. Ops
executed while a tape is active append one record each; since an op can
only run after its inputs exist, the record order is already topological
and ``backward`` simply walks it in reverse. With no active tape the same
ops run as plain numpy computations, which is the fast path for frozen
model evaluation.
"""

from __future__ import annotations

import numpy as np

from exflow.errors import ContractError, DataError, DimensionError

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of primitive ops for one reverse-mode sweep."""

    def __init__(self):
        self._records = []  # (out, inputs, pull) in execution order

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a gradient tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out, inputs, pull):
        self._records.append((out, inputs, pull))

    def reset(self):
        """Drop every record; a subsequent backward sweep is a no-op."""
        self._records.clear()


class Tensor:
    """A row-major float64 array plus an optional gradient buffer.

    ``grad`` is lazily allocated by the backward sweep; ``Parameter``
    keeps a persistent zero-initialized buffer instead.
    """

    __slots__ = ("data", "grad", "_tape")

    def __init__(self, data, _tape=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self._tape = _tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # Operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    def __rmul__(self, other):
        return mul_scalar(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf; its gradient buffer accumulates across ops."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        if not np.isfinite(self.data).all():
            raise DataError(f"parameter {name!r} initialized with non-finite values")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every participating tensor's grad.

    ``output`` must be a scalar produced while ``tape`` was active.
    Parameter gradients accumulate into their persistent buffers; the
    caller zeroes them between steps.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if output._tape is not tape:
        raise ContractError("output was not produced under this tape")
    output.grad = np.ones_like(output.data)
    for out, inputs, pull in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        for inp, contrib in zip(inputs, pull(g)):
            if contrib is None:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += contrib


def _make(data, inputs, pull) -> Tensor:
    out = Tensor(data, _tape=_ACTIVE_TAPE)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(out, inputs, pull)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    inv = 1.0 / b.data
    return _make(a.data * inv, (a, b), lambda g: (g * inv, -g * a.data * inv * inv))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# matrix ops and restricted broadcasts


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """out[i, :] = x[i, :] + v for a matrix x and vector v."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec: shapes {x.shape} and {v.shape}")
    return _make(x.data + v.data, (x, v), lambda g: (g, g.sum(axis=0)))


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """out[i, :] = x[i, :] * v for a matrix x and vector v."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"mul_rowvec: shapes {x.shape} and {v.shape}")
    return _make(
        x.data * v.data,
        (x, v),
        lambda g: (g * v.data, (g * x.data).sum(axis=0)),
    )


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    out = _softplus_np(x.data)
    sig = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * sig,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    inv = 1.0 / x.data
    return _make(np.log(x.data), (x,), lambda g: (g * inv,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Evaluated on the negative branch to avoid exp overflow.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# reductions, reshaping, assembly


def sum_all(x: Tensor) -> Tensor:
    return _make(
        np.asarray(x.data.sum()),
        (x,),
        lambda g: (np.full_like(x.data, g.reshape(())),),
    )


def sum_rows(x: Tensor) -> Tensor:
    """Sum a matrix along axis 1, giving one value per row."""
    if x.data.ndim != 2:
        raise DimensionError(f"sum_rows needs a matrix, got {x.shape}")
    return _make(
        x.data.sum(axis=1),
        (x,),
        lambda g: (np.broadcast_to(g[:, None], x.shape).copy(),),
    )


def reshape(x: Tensor, shape) -> Tensor:
    return _make(
        x.data.reshape(shape),
        (x,),
        lambda g: (g.reshape(x.shape),),
    )


def prevsum_rows(x: Tensor) -> Tensor:
    """out[i, :] = sum of rows 0..i-1 of x (row 0 is zero).

    This is the ordered prefix sum the exchangeable predictive recursion
    threads through a batch.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"prevsum_rows needs a matrix, got {x.shape}")
    out = np.zeros_like(x.data)
    np.cumsum(x.data[:-1], axis=0, out=out[1:])

    def pull(g):
        # grad[j] = sum of g rows strictly after j
        tail = np.cumsum(g[::-1], axis=0)[::-1]
        return (tail - g,)

    return _make(out, (x,), pull)


def concat_cols(parts) -> Tensor:
    """Concatenate matrices along axis 1."""
    parts = list(parts)
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError("concat_cols: row counts differ")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def pull(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), pull)


def concat_rows(parts) -> Tensor:
    """Concatenate matrices along axis 0."""
    parts = list(parts)
    cols = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise DimensionError("concat_rows: column counts differ")
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def pull(g):
        return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), pull)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns start:stop of a matrix, as a copy."""
    if x.data.ndim != 2:
        raise DimensionError(f"slice_cols needs a matrix, got {x.shape}")

    def pull(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), pull)
