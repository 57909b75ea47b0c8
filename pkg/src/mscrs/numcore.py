"""Dense float64 tensors with a reverse-mode autodiff tape and an Adam optimizer.

Everything differentiable in this package (graph propagation, the decoder
LM, the prompt-learning losses) bottoms out in the ops defined here. Design
constraints:

 - float64 only, dense only; desk-scale sizes make speed a non-issue and
   make central-difference gradient checks sharp.
 - NaN/Inf anywhere is a contract violation and raises immediately.
 - A tape records ops only while active and only when an input requires
   gradients; tapes are per-thread (see ``Tape``).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class NumcoreError(ValueError):
    """Shape mismatch, non-finite value, or misuse of the tape."""


def _as_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)  # always copy: tensors own their buffers
    if not np.all(np.isfinite(arr)):
        raise NumcoreError("non-finite value in tensor payload")
    return arr


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialized
    ``grad`` buffer; ``backward`` accumulates into it and ``adam_step``
    clears it. Non-leaf (op output) tensors never hold a grad buffer.
    """

    __slots__ = ("values", "requires_grad", "grad", "tape", "_leaf")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None
        self.tape: Tape | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise NumcoreError("item() requires a single-element tensor")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class TapeEntry:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_state = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Append-only record of one forward pass, in topological order.

    Use as a context manager around a forward computation; ``backward`` then
    replays it in reverse. A tape and the tensors recorded on it belong to
    one thread.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _current_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


def _record(kind: str, inputs: Sequence[Tensor], out_values: np.ndarray,
            backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out_values)):
        raise NumcoreError(f"non-finite output from op '{kind}'")
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.grad = None
    out.tape = None
    out._leaf = True
    out.requires_grad = False
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        # Without an active tape the output is detached (a plain constant).
        out.requires_grad = True
        out._leaf = False
        out.tape = tape
        tape.entries.append(TapeEntry(kind, tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# Ops. Each returns a new Tensor; backward_fn(grad_out, accumulate) adds the
# local vector-Jacobian product into the inputs' slots via `accumulate`.
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumcoreError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def bw(g, acc):
        acc(a, g @ b.values.T)
        acc(b, a.values.T @ g)

    return _record("matmul", (a, b), out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise NumcoreError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = a.values + b.values

    def bw(g, acc):
        acc(a, g)
        acc(b, g)

    return _record("add", (a, b), out, bw)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n-by-d matrix."""
    if a.values.ndim != 2 or v.values.ndim != 1 or a.shape[1] != v.shape[0]:
        raise NumcoreError(f"add_rowvec shape mismatch {a.shape} + {v.shape}")
    out = a.values + v.values[None, :]

    def bw(g, acc):
        acc(a, g)
        acc(v, g.sum(axis=0))

    return _record("add-rowvec", (a, v), out, bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NumcoreError("scale factor must be finite")
    out = a.values * c

    def bw(g, acc):
        acc(a, g * c)

    return _record("scale", (a,), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise NumcoreError(f"elementwise-multiply shape mismatch {a.shape} vs {b.shape}")
    out = a.values * b.values

    def bw(g, acc):
        acc(a, g * b.values)
        acc(b, g * a.values)

    return _record("elementwise-multiply", (a, b), out, bw)


def mul_rowvec(a: Tensor, v: Tensor) -> Tensor:
    if a.values.ndim != 2 or v.values.ndim != 1 or a.shape[1] != v.shape[0]:
        raise NumcoreError(f"mul_rowvec shape mismatch {a.shape} * {v.shape}")
    out = a.values * v.values[None, :]

    def bw(g, acc):
        acc(a, g * v.values[None, :])
        acc(v, (g * a.values).sum(axis=0))

    return _record("mul-rowvec", (a, v), out, bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise NumcoreError("concat-rows of zero tensors")
    mats = [p.values for p in parts]
    if any(m.ndim != 2 for m in mats):
        raise NumcoreError("concat-rows expects 2-D tensors")
    widths = {m.shape[1] for m in mats}
    if len(widths) != 1:
        raise NumcoreError(f"concat-rows width mismatch {sorted(widths)}")
    out = np.concatenate(mats, axis=0)
    sizes = [m.shape[0] for m in mats]

    def bw(g, acc):
        ofs = 0
        for p, n in zip(parts, sizes):
            acc(p, g[ofs:ofs + n])
            ofs += n

    return _record("concat-rows", tuple(parts), out, bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise NumcoreError("concat-cols of zero tensors")
    mats = [p.values for p in parts]
    heights = {m.shape[0] for m in mats}
    if len(heights) != 1:
        raise NumcoreError(f"concat-cols height mismatch {sorted(heights)}")
    out = np.concatenate(mats, axis=1)
    sizes = [m.shape[1] for m in mats]

    def bw(g, acc):
        ofs = 0
        for p, n in zip(parts, sizes):
            acc(p, g[:, ofs:ofs + n])
            ofs += n

    return _record("concat-cols", tuple(parts), out, bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise NumcoreError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")
    out = a.values[start:stop].copy()

    def bw(g, acc):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        acc(a, full)

    return _record("slice-rows", (a,), out, bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise NumcoreError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    out = a.values[:, start:stop].copy()

    def bw(g, acc):
        full = np.zeros_like(a.values)
        full[:, start:stop] = g
        acc(a, full)

    return _record("slice-cols", (a,), out, bw)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows: n-by-d matrix -> length-d vector."""
    if a.values.ndim != 2 or a.shape[0] == 0:
        raise NumcoreError(f"mean-rows needs a nonempty 2-D tensor, got {a.shape}")
    n = a.shape[0]
    out = a.values.mean(axis=0)

    def bw(g, acc):
        acc(a, np.repeat(g[None, :], n, axis=0) / n)

    return _record("mean-rows", (a,), out, bw)


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.values.sum())

    def bw(g, acc):
        acc(a, np.full_like(a.values, float(g)))

    return _record("sum", (a,), out, bw)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise NumcoreError(f"dot-product shape mismatch {a.shape} vs {b.shape}")
    out = np.asarray(a.values @ b.values)

    def bw(g, acc):
        acc(a, float(g) * b.values)
        acc(b, float(g) * a.values)

    return _record("dot-product", (a, b), out, bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.values.reshape(shape).copy()

    def bw(g, acc):
        acc(a, g.reshape(a.values.shape))

    return _record("reshape", (a,), out, bw)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise NumcoreError("transpose expects a 2-D tensor")
    out = a.values.T.copy()

    def bw(g, acc):
        acc(a, g.T)

    return _record("transpose", (a,), out, bw)


def row_softmax(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise NumcoreError("row-softmax expects a 2-D tensor")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g, acc):
        # d softmax: s * (g - sum(g * s)) per row
        inner = (g * out).sum(axis=1, keepdims=True)
        acc(a, out * (g - inner))

    return _record("row-softmax", (a,), out, bw)


def row_logsumexp(a: Tensor) -> Tensor:
    """Stable per-row log-sum-exp: n-by-d -> length-n vector."""
    if a.values.ndim != 2:
        raise NumcoreError("row-logsumexp expects a 2-D tensor")
    m = a.values.max(axis=1, keepdims=True)
    e = np.exp(a.values - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)
    soft = e / s

    def bw(g, acc):
        acc(a, soft * g[:, None])

    return _record("row-logsumexp", (a,), out, bw)


def tlog(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise NumcoreError("log of non-positive value")
    out = np.log(a.values)

    def bw(g, acc):
        acc(a, g / a.values)

    return _record("log", (a,), out, bw)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def bw(g, acc):
        acc(a, g * out)

    return _record("exp", (a,), out, bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)
    mask = (a.values > 0).astype(np.float64)

    def bw(g, acc):
        acc(a, g * mask)

    return _record("relu", (a,), out, bw)


def layer_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row normalization to mean 0, variance 1 (up to eps)."""
    if a.values.ndim != 2:
        raise NumcoreError("layer-normalize expects a 2-D tensor")
    mu = a.values.mean(axis=1, keepdims=True)
    centered = a.values - mu
    var = (centered ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def bw(g, acc):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * out).mean(axis=1, keepdims=True)
        acc(a, inv * (g - gm - out * gy))

    return _record("layer-normalize", (a,), out, bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by a constant. Mask is not differentiated."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.values.shape:
        raise NumcoreError(f"masked-fill mask shape {mask.shape} != {a.shape}")
    out = np.where(mask, float(value), a.values)
    keep = (~mask).astype(np.float64)

    def bw(g, acc):
        acc(a, g * keep)

    return _record("masked-fill", (a,), out, bw)


def embedding_gather(table: Tensor, ids: Sequence[int]) -> Tensor:
    if table.values.ndim != 2:
        raise NumcoreError("embedding-gather expects a 2-D table")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise NumcoreError("embedding-gather index out of range")
    out = table.values[idx].copy()

    def bw(g, acc):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        acc(table, full)

    return _record("embedding-gather", (table,), out, bw)


def take_entries(a: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Pick a[rows[i], cols[i]] for each i -> 1-D tensor."""
    r = np.asarray(list(rows), dtype=np.int64)
    c = np.asarray(list(cols), dtype=np.int64)
    if r.shape != c.shape:
        raise NumcoreError("take_entries rows/cols length mismatch")
    out = a.values[r, c].copy()

    def bw(g, acc):
        full = np.zeros_like(a.values)
        np.add.at(full, (r, c), g)
        acc(a, full)

    return _record("take-entries", (a,), out, bw)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "add-rowvec": add_rowvec,
    "scale": scale,
    "concat-rows": lambda *parts: concat_rows(parts),
    "concat-cols": lambda *parts: concat_cols(parts),
    "slice-rows": slice_rows,
    "slice-cols": slice_cols,
    "mean-rows": mean_rows,
    "sum": tsum,
    "dot-product": dot,
    "reshape": reshape,
    "transpose": transpose,
    "row-softmax": row_softmax,
    "row-logsumexp": row_logsumexp,
    "log": tlog,
    "exp": texp,
    "relu": relu,
    "layer-normalize": layer_normalize,
    "elementwise-multiply": mul,
    "mul-rowvec": mul_rowvec,
    "masked-fill": masked_fill,
    "embedding-gather": embedding_gather,
    "take-entries": take_entries,
}


def apply_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by its wire name. Unknown kinds raise."""
    fn = _OPS.get(kind)
    if fn is None:
        raise NumcoreError(f"unknown op-kind '{kind}'")
    return fn(*inputs, **kwargs)


def op_kinds() -> list[str]:
    return sorted(_OPS)


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf reachable from ``loss``.

    Leaves that the loss does not depend on keep their (zero) grad buffers
    untouched, so reading them after backward reports a zero gradient.
    """
    if loss.values.size != 1:
        raise NumcoreError("backward requires a scalar loss")
    tape = loss.tape
    if tape is None or not tape.entries:
        raise NumcoreError("loss is not attached to a nonempty tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}

    def acc(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if not np.all(np.isfinite(g)):
            raise NumcoreError("NaN/Inf encountered during reverse sweep")
        if t._leaf:
            t.grad += g
        else:
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g.copy()

    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is not None:
            entry.backward_fn(g, acc)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor, deterministically; the two
    base evaluations are compared to detect nondeterminism.
    """
    if h <= 0:
        raise NumcoreError("grad_check step must be positive")
    base = x.values.copy()

    probe1 = f(Tensor(base)).item()
    probe2 = f(Tensor(base)).item()
    if probe1 != probe2:
        raise NumcoreError("function is not deterministic across probe evaluations")

    xt = Tensor(base, requires_grad=True)
    with Tape():
        loss = f(xt)
        backward(loss)
    analytic = xt.grad.copy()

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Adaptive-moment optimizer state over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0 or not (0.0 <= beta1 < 1.0) or not (0.0 <= beta2 < 1.0) or eps <= 0:
            raise NumcoreError("invalid optimizer hyperparameters")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]


def adam_step(state: AdamState) -> None:
    """One bias-corrected adaptive-moment update; zeroes grads afterwards."""
    for p in state.params:
        if p.grad is None:
            raise NumcoreError("parameter is missing its gradient buffer")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.all(np.isfinite(update)):
            raise NumcoreError("non-finite optimizer update")
        p.values -= update
        p.grad.fill(0.0)
