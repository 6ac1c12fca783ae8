"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every forward op computes eagerly on numpy arrays and, when gradients are
enabled, appends a backward rule to the module-level tape. ``backward()``
replays the tape in reverse execution order, which is always a valid
topological order of the computation graph, and accumulates gradients into
every tensor that requires them. All storage is float64 and row-major; ops
copy rather than alias, and every forward result is checked for NaN/Inf.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NonFiniteError, ShapeError, TapeError

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class Tensor:
    """A real-valued n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "frozen")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.frozen = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable tensor. ``frozen=True`` blocks gradient accumulation:
    a frozen parameter reachable from the loss receives an all-zero gradient."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data, frozen: bool = False):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.tensor.frozen = bool(frozen)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def frozen(self) -> bool:
        return self.tensor.frozen

    @frozen.setter
    def frozen(self, flag: bool) -> None:
        self.tensor.frozen = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, frozen={self.frozen})"


class Tape:
    """Ordered record of executed ops: (output, backward rule, op name)."""

    __slots__ = ("records", "consumed")

    def __init__(self):
        self.records: list[tuple[Tensor, object, str]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)


_tape = Tape()
_grad_enabled = True
# Test-harness fault injection: (op name, scale) applied to the upstream
# gradient fed into that op's backward rule. Used as a negative control.
_backward_fault: tuple[str, float] | None = None


def active_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    """Discard all recorded ops and re-arm the tape for a fresh backward."""
    global _tape
    _tape = Tape()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values still computed)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_backward_fault(op_name: str, scale: float) -> None:
    global _backward_fault
    _backward_fault = (op_name, float(scale))


def clear_backward_fault() -> None:
    global _backward_fault
    _backward_fault = None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(name: str, out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    _check_finite(out_data, name)
    track = _grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(out_data, requires_grad=track)
    if track:
        _tape.records.append((out, backward_fn, name))
    return out


def _accumulate(t, g: np.ndarray) -> None:
    if not (isinstance(t, Tensor) and t.requires_grad):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    if t.frozen:
        return
    t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    The tape may be consumed exactly once; run ``reset_tape()`` before the
    next forward/backward cycle.
    """
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ShapeError("backward requires a scalar (shape ()) Tensor loss")
    if not _tape.records:
        raise TapeError("backward called on an empty tape")
    if _tape.consumed:
        raise TapeError("tape already consumed; call reset_tape() first")
    if not loss.requires_grad:
        raise TapeError("loss is not connected to the tape")
    _tape.consumed = True
    loss.grad = np.ones((), dtype=np.float64)
    for out, fn, name in reversed(_tape.records):
        if out.grad is None:
            continue
        g = out.grad
        if _backward_fault is not None and name == _backward_fault[0]:
            g = g * _backward_fault[1]
        fn(g)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record("matmul", out, (a, b), _bw)


def transpose_2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose_2d expects a 2-D tensor, got {x.shape}")
    out = x.data.T.copy()

    def _bw(g):
        _accumulate(x, g.T)

    return _record("transpose_2d", out, (x,), _bw)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; also accepts a python scalar or a broadcastable operand
    (row vector against a matrix, scalar tensor)."""
    if not isinstance(b, Tensor):
        out = a.data + float(b)

        def _bw_scalar(g):
            _accumulate(a, g)

        return _record("add", out, (a,), _bw_scalar)

    out = a.data + b.data

    def _bw(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(g, b.data.shape))

    return _record("add", out, (a, b), _bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; same broadcasting support as ``add``."""
    if not isinstance(b, Tensor):
        c = float(b)
        out = a.data * c

        def _bw_scalar(g):
            _accumulate(a, g * c)

        return _record("mul", out, (a,), _bw_scalar)

    out = a.data * b.data

    def _bw(g):
        _accumulate(a, _reduce_to(g * b.data, a.data.shape))
        _accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return _record("mul", out, (a, b), _bw)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum()

    def _bw(g):
        _accumulate(x, np.full(x.data.shape, float(g)))

    return _record("sum_all", np.asarray(out), (x,), _bw)


def pad_rows(x: Tensor, before: int, after: int) -> Tensor:
    """Append zero rows before/after a 2-D tensor."""
    if before < 0 or after < 0:
        raise ShapeError("pad_rows amounts must be non-negative")
    n, d = x.shape
    out = np.zeros((before + n + after, d))
    out[before : before + n] = x.data

    def _bw(g):
        _accumulate(x, g[before : before + n].copy())

    return _record("pad_rows", out, (x,), _bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows [{start}:{stop}] outside 0..{n}")
    out = x.data[start:stop].copy()

    def _bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _accumulate(x, full)

    return _record("slice_rows", out, (x,), _bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    d = x.shape[1]
    if not (0 <= start <= stop <= d):
        raise ShapeError(f"slice_cols [{start}:{stop}] outside 0..{d}")
    out = x.data[:, start:stop].copy()

    def _bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _record("slice_cols", out, (x,), _bw)


def concat_last_axis(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_last_axis needs at least one part")
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def _bw(g):
        off = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[..., off : off + w].copy())
            off += w

    return _record("concat_last_axis", out, tuple(parts), _bw)


def repeat_upsample(x: Tensor, factor: int) -> Tensor:
    """Replicate each row ``factor`` times; backward sums over each group."""
    if factor < 1:
        raise ConfigError(f"repeat factor must be >= 1, got {factor}")
    n, d = x.shape
    out = np.repeat(x.data, factor, axis=0)

    def _bw(g):
        _accumulate(x, g.reshape(n, factor, d).sum(axis=1))

    return _record("repeat_upsample", out, (x,), _bw)


def mean_pool_1d(x: Tensor, window: int, stride: int) -> Tensor:
    """Mean over ``window`` consecutive rows at ``stride`` steps (VALID: no
    implicit padding, remainder rows are dropped)."""
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be >= 1")
    n, d = x.shape
    if n < window:
        raise ShapeError(f"input rows {n} < window {window}; pad first")
    n_out = (n - window) // stride + 1
    if stride == window:
        trimmed = x.data[: n_out * window]
        out = trimmed.reshape(n_out, window, d).mean(axis=1)
    else:
        out = np.zeros((n_out, d))
        for t in range(window):
            out += x.data[t : t + stride * n_out : stride][:n_out]
        out /= window

    def _bw(g):
        gx = np.zeros_like(x.data)
        gw = g / window
        if stride == window:
            gx[: n_out * window] = np.repeat(gw, window, axis=0)
        else:
            idx = np.arange(n_out) * stride
            for t in range(window):
                np.add.at(gx, idx + t, gw)
        _accumulate(x, gx)

    return _record("mean_pool_1d", out, (x,), _bw)


def conv1d_same(x: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Channel-mixing 1-D convolution with SAME zero padding (output length
    equals input length). ``filters`` has shape (k, d_in, d_out), k odd."""
    if filters.data.ndim != 3:
        raise ShapeError(f"filters must be (k, d_in, d_out), got {filters.shape}")
    k, d_in, d_out = filters.shape
    if k % 2 == 0:
        raise ConfigError(f"conv kernel size must be odd, got {k}")
    n, d = x.shape
    if d != d_in:
        raise ShapeError(f"input channels {d} != filter channels {d_in}")
    if bias.shape != (d_out,):
        raise ShapeError(f"bias must have shape ({d_out},), got {bias.shape}")
    pad = (k - 1) // 2
    xp = np.zeros((n + k - 1, d_in))
    xp[pad : pad + n] = x.data
    out = np.tile(bias.data, (n, 1))
    for t in range(k):
        out += xp[t : t + n] @ filters.data[t]

    def _bw(g):
        _accumulate(bias, g.sum(axis=0))
        gf = np.zeros_like(filters.data)
        gxp = np.zeros_like(xp)
        for t in range(k):
            gf[t] = xp[t : t + n].T @ g
            gxp[t : t + n] += g @ filters.data[t].T
        _accumulate(filters, gf)
        _accumulate(x, gxp[pad : pad + n].copy())

    return _record("conv1d_same", out, (x, filters, bias), _bw)


def softmax_last_axis(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _record("softmax_last_axis", y, (x,), _bw)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Select rows of ``table`` by integer id; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("ids must be a flat sequence")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ValueError(f"id out of range 0..{vocab - 1}")
    out = table.data[idx].copy()

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accumulate(table, gt)

    return _record("embedding_gather", out, (table,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        _accumulate(gain, (g * xhat).sum(axis=0))
        _accumulate(bias, g.sum(axis=0))
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True)
        term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * term)

    return _record("layer_norm", out, (x, gain, bias), _bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = x.data * cdf

    def _bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) / _SQRT_2PI
        _accumulate(x, g * (cdf + x.data * pdf))

    return _record("gelu", out, (x,), _bw)


def cross_entropy_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Token-level cross entropy in nats against integer targets.

    ``reduction`` is "mean" (per-token average) or "sum".
    """
    ids = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("logits must be (tokens, vocab)")
    n, vocab = logits.shape
    if ids.shape != (n,):
        raise ShapeError(f"targets must have shape ({n},)")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"target id out of range 0..{vocab - 1}")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    norm = e.sum(axis=-1, keepdims=True)
    lse = np.log(norm)[:, 0] + m[:, 0]
    losses = lse - logits.data[np.arange(n), ids]
    out = losses.mean() if reduction == "mean" else losses.sum()

    def _bw(g):
        p = e / norm
        p[np.arange(n), ids] -= 1.0
        scale = float(g) / n if reduction == "mean" else float(g)
        _accumulate(logits, p * scale)

    return _record("cross_entropy_with_logits", np.asarray(out), (logits,), _bw)
