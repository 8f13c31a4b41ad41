"""Dense-tensor reverse-mode autodiff engine.

Just enough machinery for the solubility model: 2-D matrices (plus 1-D
vectors and scalar reductions), a gradient tape, and the operations the
architecture needs -- matrix multiply, broadcast add/mul, ReLU, sigmoid,
tanh, exp, masked row softmax, layer normalization, dropout, concatenation,
row gather, segment sum/mean, column slicing and MSE.

Tensors live on one Tape.  A forward pass records nodes in topological
order; ``tape.backward(loss)`` replays them in reverse, accumulating
gradients into every leaf created with ``requires_grad=True``.  A tape is
single-use: backward consumes it.

Values are float32 by default; construct ``Tape(dtype=np.float64)`` for
gradient checking.  All randomness flows through :class:`SplitRng`,
a counter-based generator that can be split into independent streams and
records how many draws it has made.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "SplitRng",
    "ShapeMismatch",
    "NotScalarLoss",
    "TapeConsumed",
    "matmul",
    "add",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "softmax_rows",
    "layer_norm",
    "dropout",
    "concat",
    "gather_rows",
    "segment_sum",
    "segment_mean",
    "slice_cols",
    "transpose",
    "reshape",
    "sum_all",
    "mean_all",
    "mse",
    "check_gradients",
]


class ShapeMismatch(ValueError):
    def __init__(self, op: str, lhs: tuple, rhs: tuple):
        super().__init__(f"{op}: incompatible shapes {lhs} and {rhs}")
        self.op = op
        self.lhs = lhs
        self.rhs = rhs


class NotScalarLoss(ValueError):
    def __init__(self, shape: tuple):
        super().__init__(f"backward requires a scalar loss, got shape {shape}")
        self.shape = shape


class TapeConsumed(RuntimeError):
    def __init__(self) -> None:
        super().__init__("this tape has already been consumed by backward()")


class SplitRng:
    """Splittable counter-based random stream (Philox under the hood).

    ``split()`` derives an independent child stream; ``draws`` counts the
    values sampled from this stream, so a run can be replayed or audited.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))
        self.draws = 0

    def split(self) -> "SplitRng":
        return SplitRng(self._seq.spawn(1)[0])

    def split_many(self, n: int) -> list["SplitRng"]:
        return [SplitRng(s) for s in self._seq.spawn(n)]

    def uniform(self, shape: tuple[int, ...] | int, low: float = 0.0,
                high: float = 1.0) -> np.ndarray:
        out = self._gen.uniform(low, high, size=shape)
        self.draws += int(np.size(out))
        return out

    def integers(self, low: int, high: int, size=None):
        out = self._gen.integers(low, high, size=size)
        self.draws += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True):
        out = self._gen.choice(seq, size=size, replace=replace)
        self.draws += int(np.size(out))
        return out


class Tensor:
    """A value on a tape, with a gradient buffer filled in by backward()."""

    __slots__ = ("tape", "values", "grad", "requires_grad")

    def __init__(self, tape: "Tape", values: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.values = values
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype})"

    # Operator sugar; every overload defers to the module-level op.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_wrap(self.tape, other)))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of operations, replayed in reverse by backward()."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def tensor(self, values, requires_grad: bool = False) -> Tensor:
        arr = np.asarray(values, dtype=self.dtype)
        return Tensor(self, arr, requires_grad)

    def _record(self, out_values: np.ndarray, parents: tuple[Tensor, ...],
                backward: Callable[[np.ndarray], None]) -> Tensor:
        if self._consumed:
            raise TapeConsumed()
        out = Tensor(self, out_values, requires_grad=True)
        self._nodes.append((out, parents, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from loss."""
        if self._consumed:
            raise TapeConsumed()
        if loss.tape is not self:
            raise ShapeMismatch("backward", (), ())
        if loss.values.shape != ():
            raise NotScalarLoss(loss.values.shape)
        self._consumed = True
        loss.grad = np.ones((), dtype=self.dtype)
        for out, parents, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            backward_fn(out.grad)


def _wrap(tape: Tape, value) -> Tensor:
    if isinstance(value, Tensor):
        if value.tape is not tape:
            raise ValueError("tensors from different tapes cannot be combined")
        return value
    return tape.tensor(value)


def _accum(t: Tensor, delta: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += delta


def _unbroadcast(delta: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = delta.ndim - len(shape)
    if extra > 0:
        delta = delta.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and delta.shape[i] != 1)
    if axes:
        delta = delta.sum(axis=axes, keepdims=True)
    return delta.reshape(shape)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(a.tape, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.values @ b.values

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy @ b.values.T)
        _accum(b, a.values.T @ dy)

    return a.tape._record(out, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    b = _wrap(a.tape, b)
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None

    def backward(dy: np.ndarray) -> None:
        _accum(a, _unbroadcast(dy, a.shape))
        _accum(b, _unbroadcast(dy, b.shape))

    return a.tape._record(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(a.tape, b)
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None

    def backward(dy: np.ndarray) -> None:
        _accum(a, _unbroadcast(dy * b.values, a.shape))
        _accum(b, _unbroadcast(dy * a.values, b.shape))

    return a.tape._record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(dy: np.ndarray) -> None:
        _accum(a, -dy)

    return a.tape._record(-a.values, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0)

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy * (a.values > 0))

    return a.tape._record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Stable piecewise form; equivalent to 1 / (1 + exp(-x)).
    x = a.values
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(a.tape.dtype)

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy * out * (1.0 - out))

    return a.tape._record(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy * (1.0 - out * out))

    return a.tape._record(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy * out)

    return a.tape._record(out, (a,), backward)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with optional boolean mask.

    Masked entries receive weight exactly 0.0 and contribute nothing to the
    row normalizer.  Stability comes from subtracting the per-row maximum of
    the unmasked entries.  Every row must keep at least one unmasked entry.
    """
    if a.values.ndim != 2:
        raise ShapeMismatch("softmax_rows", a.shape, ())
    x = a.values
    if mask is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeMismatch("softmax_rows", a.shape, mask.shape)
        if not mask.any(axis=1).all():
            raise ValueError("softmax_rows: a row is fully masked")
        neg_inf = np.where(mask, x, -np.inf)
        m = neg_inf.max(axis=1, keepdims=True)
        e = np.zeros_like(x)
        np.exp(x - m, where=mask, out=e)
        e[~mask] = 0.0
    z = e.sum(axis=1, keepdims=True)
    out = e / z

    def backward(dy: np.ndarray) -> None:
        # dx = s * (dy - sum(dy * s)); masked entries have s = 0, so they
        # receive zero gradient automatically.
        inner = (dy * out).sum(axis=1, keepdims=True)
        _accum(a, out * (dy - inner))

    return a.tape._record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance, then scale and shift."""
    if a.values.ndim != 2 or gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise ShapeMismatch("layer_norm", a.shape, gain.shape)
    x = a.values
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = xhat * gain.values + bias.values

    def backward(dy: np.ndarray) -> None:
        dxhat = dy * gain.values
        row_mean = dxhat.mean(axis=1, keepdims=True)
        row_proj = (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(a, inv_std * (dxhat - row_mean - xhat * row_proj))
        _accum(gain, (dy * xhat).sum(axis=0))
        _accum(bias, dy.sum(axis=0))

    return a.tape._record(out, (a, gain, bias), backward)


def dropout(a: Tensor, p: float, training: bool, rng: SplitRng | None = None) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-p) so evaluation is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    keep = (rng.uniform(a.shape) >= p).astype(a.tape.dtype)
    scale = 1.0 / (1.0 - p)
    out = a.values * keep * scale

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy * keep * scale)

    return a.tape._record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    tape = tensors[0].tape
    for t in tensors:
        if t.tape is not tape:
            raise ValueError("tensors from different tapes cannot be combined")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(dy: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets, offsets[1:]):
            index = [slice(None)] * dy.ndim
            index[axis] = slice(lo, hi)
            _accum(t, dy[tuple(index)])

    return tape._record(out, tuple(tensors), backward)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeMismatch("gather_rows", a.shape, indices.shape)
    out = a.values[indices]

    def backward(dy: np.ndarray) -> None:
        if not a.requires_grad:
            return
        delta = np.zeros_like(a.values)
        np.add.at(delta, indices, dy)
        _accum(a, delta)

    return a.tape._record(out, (a,), backward)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows sharing a segment id; output row s = sum of rows with id s."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if a.values.ndim != 2 or segment_ids.shape != (a.shape[0],):
        raise ShapeMismatch("segment_sum", a.shape, segment_ids.shape)
    out = np.zeros((num_segments, a.shape[1]), dtype=a.tape.dtype)
    np.add.at(out, segment_ids, a.values)

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy[segment_ids])

    return a.tape._record(out, (a,), backward)


def segment_mean(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Average rows sharing a segment id.  Every segment must be non-empty."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if a.values.ndim != 2 or segment_ids.shape != (a.shape[0],):
        raise ShapeMismatch("segment_mean", a.shape, segment_ids.shape)
    counts = np.bincount(segment_ids, minlength=num_segments)
    if (counts == 0).any():
        raise ValueError("segment_mean: empty segment")
    out = np.zeros((num_segments, a.shape[1]), dtype=a.tape.dtype)
    np.add.at(out, segment_ids, a.values)
    out /= counts[:, None]

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy[segment_ids] / counts[segment_ids, None])

    return a.tape._record(out, (a,), backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.values.ndim != 2 or not (0 <= lo <= hi <= a.shape[1]):
        raise ShapeMismatch("slice_cols", a.shape, (lo, hi))
    out = a.values[:, lo:hi].copy()

    def backward(dy: np.ndarray) -> None:
        if not a.requires_grad:
            return
        delta = np.zeros_like(a.values)
        delta[:, lo:hi] = dy
        _accum(a, delta)

    return a.tape._record(out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeMismatch("transpose", a.shape, ())

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy.T)

    return a.tape._record(a.values.T.copy(), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.values.reshape(shape)

    def backward(dy: np.ndarray) -> None:
        _accum(a, dy.reshape(a.shape))

    return a.tape._record(out.copy(), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.values.sum(), dtype=a.tape.dtype)

    def backward(dy: np.ndarray) -> None:
        _accum(a, np.full(a.shape, dy, dtype=a.tape.dtype))

    return a.tape._record(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    out = np.asarray(a.values.mean(), dtype=a.tape.dtype)

    def backward(dy: np.ndarray) -> None:
        _accum(a, np.full(a.shape, dy / n, dtype=a.tape.dtype))

    return a.tape._record(out, (a,), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; returns a scalar tensor."""
    target = _wrap(pred.tape, target)
    if pred.shape != target.shape:
        raise ShapeMismatch("mse", pred.shape, target.shape)
    diff = pred.values - target.values
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.tape.dtype)

    def backward(dy: np.ndarray) -> None:
        g = dy * 2.0 * diff / n
        _accum(pred, g)
        _accum(target, -g)

    return pred.tape._record(out, (pred, target), backward)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    progress: Callable[[int], None] | None = None,
) -> float:
    """Compare tape gradients against central finite differences.

    ``fn(tape, *tensors)`` must build and return a scalar loss from tensors
    wrapped on the given tape in the order of ``inputs``.  All work runs in
    float64.  Returns the maximum elementwise relative error
    ``|a - b| / max(1, |a|, |b|)`` across every input element.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    def run(arrays: Sequence[np.ndarray], want_grads: bool):
        tape = Tape(dtype=np.float64)
        tensors = [tape.tensor(x, requires_grad=want_grads) for x in arrays]
        loss = fn(tape, *tensors)
        if want_grads:
            tape.backward(loss)
            grads = [
                t.grad if t.grad is not None else np.zeros_like(t.values)
                for t in tensors
            ]
            return float(loss.values), grads
        return float(loss.values), None

    _, analytic = run(inputs, want_grads=True)

    worst = 0.0
    done = 0
    for which, base in enumerate(inputs):
        flat = base.reshape(-1)
        grad_flat = analytic[which].reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            up, _ = run(inputs, want_grads=False)
            flat[j] = original - h
            down, _ = run(inputs, want_grads=False)
            flat[j] = original
            numeric = (up - down) / (2.0 * h)
            a, b = grad_flat[j], numeric
            err = abs(a - b) / max(1.0, abs(a), abs(b))
            worst = max(worst, err)
            done += 1
            if progress is not None:
                progress(done)
    return worst
