"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the decoder model are provided. Every op checks
that its output is finite and raises ``FloatingPointError`` otherwise.

Usage::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = sum_all(silu(x))
    tape.backward(y)
    x.grad
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {32: np.float32, 64: np.float64}
_state = threading.local()


def get_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def set_precision(bits: int) -> None:
    """Set the element precision (32 or 64) for tensors created on this thread."""
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state.dtype = _DTYPES[bits]


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    prev = get_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _state.dtype = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """An n-d array with an optional gradient buffer.

    Tensors are treated as immutable once created. The one exception is the
    optimizer, which updates leaf parameters in place between tapes.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed ops.

    A tape is entered as a context manager; ops executed inside it on tensors
    that require gradients are recorded. A tape belongs to one thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

        Leaf buffers start at zero; an intermediate buffer is created by its
        first contribution, which is equivalent to zero plus that contribution.
        """
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss")
        if not any(n.out is loss for n in self.nodes):
            raise ValueError("loss was not produced on this tape")
        produced = {id(n.out) for n in self.nodes}
        for node in self.nodes:
            node.out.grad = None
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    t.grad = np.zeros_like(t.data)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.out.grad is None:
                continue
            grads = node.backward(node.out.grad)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += g


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor(_check_finite(data, op))
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward))
    return out


# ---------------------------------------------------------------------------
# Elementwise ops

def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "scalar_b"
    if a.size == 1 and a.ndim <= 1:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "row_b"
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return "row_a"
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same" or not kind.endswith(side):
        return g
    if kind.startswith("scalar"):
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    return g.reshape(t.shape) if g.shape != t.shape else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)

    def backward(g):
        return _fit(_reduce(g, kind, "a"), a), _fit(_reduce(g, kind, "b"), b)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)

    def backward(g):
        return _fit(_reduce(g, kind, "a"), a), _fit(_reduce(-g, kind, "b"), b)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)

    def backward(g):
        return (_fit(_reduce(g * b.data, kind, "a"), a),
                _fit(_reduce(g * a.data, kind, "b"), b))

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = get_dtype()(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x gives 1 / inf = 0, which is correct
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _make(x.data * s, (x,), backward, "silu")


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


# ---------------------------------------------------------------------------
# Shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at integer ``ids``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# Linear algebra and layers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading dims of ``a`` are flattened."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")
    a2 = a.data.reshape(-1, a.shape[-1])

    def backward(g):
        g2 = g.reshape(-1, b.shape[1])
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    return _make(out, (a, b), backward, "matmul")


def rmsnorm(x: Tensor, gain: Tensor, epsilon: float = 1e-6) -> Tensor:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if gain.data.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ValueError(f"gain shape {gain.shape} does not match {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + epsilon)
    xhat = x.data * inv

    def backward(g):
        gx_hat = g * gain.data
        dot = (gx_hat * xhat).sum(axis=-1, keepdims=True)
        gx = inv * (gx_hat - xhat * dot / d)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _make(xhat * gain.data, (x, gain), backward, "rmsnorm")


_rope_cache: dict = {}


def rope_tables(t: int, dh: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [t, dh] for half-split rotary embeddings."""
    key = (t, dh, theta, np.dtype(dtype).str)
    if key not in _rope_cache:
        if dh % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        freqs = theta ** (-np.arange(0, dh // 2, dtype=np.float64) * 2.0 / dh)
        ang = np.arange(t, dtype=np.float64)[:, None] * freqs[None, :]
        ang = np.concatenate([ang, ang], axis=1)
        _rope_cache[key] = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
    return _rope_cache[key]


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[:, :half], sin[:, :half]
    out = np.empty_like(x)
    np.subtract(x1 * c, x2 * s, out=out[..., :half])
    np.add(x2 * c, x1 * s, out=out[..., half:])
    return out


def causal_attention(q: Tensor, k: Tensor, v: Tensor, rope_theta: float = 10000.0) -> Tensor:
    """Causal softmax attention over ``[..., h, t, dh]`` with rotary q/k."""
    if not (q.shape == k.shape == v.shape) or q.data.ndim < 3:
        raise ValueError(f"attention shape mismatch {q.shape}, {k.shape}, {v.shape}")
    t, dh = q.shape[-2], q.shape[-1]
    cos, sin = rope_tables(t, dh, rope_theta, q.data.dtype)
    qr = apply_rope(q.data, cos, sin)
    kr = apply_rope(k.data, cos, sin)
    scl = q.data.dtype.type(1.0 / np.sqrt(dh))
    scores = (qr @ np.swapaxes(kr, -1, -2)) * scl
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores[..., future] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scl
        gqr = gs @ kr
        gkr = np.swapaxes(gs, -1, -2) @ qr
        return apply_rope(gqr, cos, -sin), apply_rope(gkr, cos, -sin), gv

    return _make(out, (q, k, v), backward, "causal_attention")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood over all positions."""
    vocab = logits.shape[-1]
    targets = np.asarray(targets).reshape(-1)
    z = logits.data.reshape(-1, vocab)
    if targets.shape[0] != z.shape[0]:
        raise ValueError("targets do not match logits")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError("target id out of range")
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = (lse - z[rows, targets]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return ((p * (g / z.shape[0])).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy")


def custom_grad(forward_value, backward_passthrough_of: Tensor) -> Tensor:
    """Return ``forward_value`` but send the incoming gradient to ``backward_passthrough_of``.

    This is the straight-through hook: nothing flows back through
    ``forward_value``; the passthrough tensor receives the gradient unchanged.
    """
    fv = forward_value.data if isinstance(forward_value, Tensor) else np.asarray(forward_value)
    src = backward_passthrough_of
    if fv.shape != src.shape:
        raise ValueError(f"custom_grad shape mismatch {fv.shape} vs {src.shape}")
    return _make(fv.astype(src.data.dtype, copy=False), (src,), lambda g: (g,), "custom_grad")


# ---------------------------------------------------------------------------

def gradient_check(fn: Callable, point, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor; ``point`` is one array or
    a sequence of arrays. Must be run in 64-bit mode.
    """
    if get_dtype() is not np.float64:
        raise RuntimeError("gradient_check requires 64-bit precision")
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]

    def call(arrs, grad=False):
        ts = [Tensor(a, requires_grad=grad) for a in arrs]
        return fn(ts[0] if single else ts), ts

    with Tape() as tape:
        out, leaves = call(arrays, grad=True)
    tape.backward(out)
    worst = 0.0
    for idx, arr in enumerate(arrays):
        analytic = leaves[idx].grad if leaves[idx].grad is not None else np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = call(arrays)[0].item()
            flat[j] = orig - step
            fm = call(arrays)[0].item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * step)
            if not np.isfinite(numeric):
                raise FloatingPointError("non-finite finite-difference value")
            a = float(analytic.reshape(-1)[j])
            worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12))
    return worst
