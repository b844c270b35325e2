"""Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.

Everything is backed by numpy arrays (float64 by default).  Operations
record themselves on the currently active :class:`Tape`; calling
:func:`backward` on a scalar loss replays the tape in reverse and
populates ``grad`` on every tensor that requires gradients.  A tape lives
for one training step and is discarded afterwards.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, EmptyOverlapError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float64


class Tensor:
    """Dense n-dimensional array, optionally tracked for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive ops, topological by construction."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable):
        self._nodes.append((out, parents, backward_fn))

    def clear(self):
        self._nodes.clear()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out_data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result, recording the node if grads are being traced."""
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, tuple(parents), backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The active tape is consumed: its nodes are cleared after the sweep.
    """
    tape = _active_tape()
    if tape is None:
        raise ParameterError("backward() called with no active tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, parents, fn in reversed(tape._nodes):
        if out.grad is None:
            continue
        fn(out.grad)
    tape.clear()


# ---------------------------------------------------------------------------
# primitive ops


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _record(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return _record(a.data * s, (a,), bw)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a scalar constant (the scalar-broadcast companion of scale)."""
    c = float(c)

    def bw(g):
        _accum(a, g)

    return _record(a.data + c, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(a.data <= 0)),
                                                     a.data.shape))
        raise DomainError(f"log: non-positive value at index {idx}")

    def bw(g):
        _accum(a, g / a.data)

    return _record(np.log(a.data), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # piecewise form avoids overflow in exp for large |x|
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _record(out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    """Smooth gating activation x * sigmoid(x)."""
    return mul(a, sigmoid(a))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner extents differ for {a.data.shape} and {b.data.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d operand, got {a.data.shape}")

    def bw(g):
        _accum(a, g.T)

    return _record(a.data.T.copy(), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    in_shape = a.data.shape

    def bw(g):
        _accum(a, g.reshape(in_shape))

    return _record(a.data.reshape(shape).copy(), (a,), bw)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-d tensor; backward scatters with accumulation."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d operand, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

    return _record(a.data[idx].copy(), (a,), bw)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-K vector to every row of an N-by-K matrix."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {a.data.shape} and {v.data.shape} incompatible")

    def bw(g):
        _accum(a, g)
        _accum(v, g.sum(axis=0))

    return _record(a.data + v.data[None, :], (a, v), bw)


def mul_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Scale every row of an N-by-K matrix elementwise by a length-K vector."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"mul_rowvec: shapes {a.data.shape} and {v.data.shape} incompatible")

    def bw(g):
        _accum(a, g * v.data[None, :])
        _accum(v, (g * a.data).sum(axis=0))

    return _record(a.data * v.data[None, :], (a, v), bw)


def row_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize each row of an N-by-K matrix to zero mean, unit variance."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_norm: expected 2-d operand, got {a.data.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        _accum(a, inv * (g - gm - y * gy))

    return _record(y, (a,), bw)


def tensor_sum(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _record(np.asarray(a.data.sum()), (a,), bw)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _record(np.asarray(a.data.mean()), (a,), bw)


def softmax_with_temperature(x: Tensor, tau: float) -> Tensor:
    """Temperature softmax over a 1-d tensor, computed with max-subtraction."""
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    if x.data.ndim != 1:
        raise ShapeError(f"softmax_with_temperature: expected 1-d input, got {x.data.shape}")
    z = x.data / tau
    z = z - z.max()
    e = np.exp(z)
    p = e / e.sum()

    def bw(g):
        _accum(x, (p * (g - np.dot(g, p))) / tau)

    return _record(p, (x,), bw)


def masked_mean_pool(tokens: Tensor, mask) -> Tensor:
    """Mean over the rows of an N-by-K matrix selected by a binary mask."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.reshape(-1).astype(bool)
    if tokens.data.ndim != 2 or m.shape[0] != tokens.data.shape[0]:
        raise ShapeError(
            f"masked_mean_pool: tokens {tokens.data.shape} vs mask length {m.shape[0]}")
    count = int(m.sum())
    if count == 0:
        raise EmptyOverlapError("masked_mean_pool: mask selects no rows")

    def bw(g):
        if tokens.requires_grad:
            gt = np.zeros_like(tokens.data)
            gt[m] = g[None, :] / count
            _accum(tokens, gt)

    return _record(tokens.data[m].mean(axis=0), (tokens,), bw)


def cross_entropy(p: Tensor, q: Tensor) -> Tensor:
    """-sum(p * log q); the target p is treated as a constant."""
    _check_same_shape(p, q, "cross_entropy")
    if np.any(p.data < 0):
        raise DomainError("cross_entropy: target has negative entries")
    bad = (q.data <= 0) & (p.data > 0)
    if np.any(bad):
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), q.data.shape))
        raise DomainError(f"cross_entropy: non-positive prediction at index {idx} with positive target")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p.data > 0, p.data * np.log(np.maximum(q.data, 1e-300)), 0.0)
    out = -terms.sum()

    def bw(g):
        gq = np.where(p.data > 0, -p.data / q.data, 0.0)
        _accum(q, float(g) * gq)

    return _record(np.asarray(out), (p, q), bw)


def cross_entropy_with_logits(p: np.ndarray, z: Tensor, tau: float) -> Tensor:
    """CE between a constant distribution p and softmax(z / tau), fused for stability."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    p = np.asarray(p, dtype=z.data.dtype)
    if p.shape != z.data.shape or z.data.ndim != 1:
        raise ShapeError(f"cross_entropy_with_logits: shapes {p.shape} vs {z.data.shape}")
    s = z.data / tau
    s = s - s.max()
    lse = np.log(np.exp(s).sum())
    logq = s - lse
    out = -(p * logq).sum()
    q = np.exp(logq)

    def bw(g):
        _accum(z, float(g) * (q * p.sum() - p) / tau)

    return _record(np.asarray(out), (z,), bw)


def weighted_match_loss_logits(z: Tensor, target: np.ndarray, alpha: float,
                               positive_only: bool = False) -> Tensor:
    """Stable correspondence-matching loss on pre-sigmoid logits.

    Two-sided form (default):
        L = mean over rows of sum_cols[ alpha*T*softplus(-z) + (1-alpha)*(1-T)*softplus(z) ]
    which equals -mean_rows sum_cols[ alpha*T*log(sigmoid z) + (1-alpha)*(1-T)*log(1-sigmoid z) ].
    The positive-only variant keeps just the first term.
    """
    t = np.asarray(target, dtype=z.data.dtype)
    if t.shape != z.data.shape:
        raise ShapeError(f"weighted_match_loss_logits: shapes {t.shape} vs {z.data.shape}")
    if z.data.ndim != 2:
        raise ShapeError("weighted_match_loss_logits: expected a 2-d matrix")
    x = z.data
    softplus_pos = np.logaddexp(0.0, x)     # softplus(z)  = -log(1 - sigmoid z)
    softplus_neg = np.logaddexp(0.0, -x)    # softplus(-z) = -log(sigmoid z)
    rows = x.shape[0]
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    if positive_only:
        out = (alpha * t * softplus_neg).sum() / rows

        def bw(g):
            _accum(z, float(g) * (-alpha * t * (1.0 - sig)) / rows)
    else:
        out = (alpha * t * softplus_neg + (1.0 - alpha) * (1.0 - t) * softplus_pos).sum() / rows

        def bw(g):
            gz = -alpha * t * (1.0 - sig) + (1.0 - alpha) * (1.0 - t) * sig
            _accum(z, float(g) * gz / rows)

    return _record(np.asarray(out), (z,), bw)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               sample: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor.  With ``sample`` set, only
    that many randomly chosen coordinates are probed (the analytic gradient
    is still the full reverse-mode sweep).
    """
    if eps <= 0:
        raise ParameterError(f"grad_check epsilon must be positive, got {eps}")
    x0 = x.data.copy()
    leaf = Tensor(x0, requires_grad=True)
    with Tape():
        out = f(leaf)
        if not np.all(np.isfinite(out.data)):
            raise DomainError("grad_check: f(x) is not finite")
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    flat = x0.reshape(-1)
    coords = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        gen = rng or np.random.default_rng(0)
        coords = gen.choice(flat.size, size=sample, replace=False)

    max_err = 0.0
    for i in coords:
        pert = flat.copy()
        pert[i] += eps
        fp = f(Tensor(pert.reshape(x0.shape))).item()
        pert[i] -= 2 * eps
        fm = f(Tensor(pert.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        max_err = max(max_err, err)
    return max_err
