"""
Dense float64 kernels with a small reverse-mode tape.

Every op is a pure function of its inputs. When a ``Tape`` is active on the
current thread and at least one input requires a gradient, the op also records
a node holding its vector-Jacobian product. ``backward`` replays the nodes in
reverse and returns gradients only for the tensors that were asked for;
anything reachable only through constants (plain arrays, untracked tensors) is
never differentiated.

The op set is exactly what the MoE forward pass and its training loss need:
matmul, broadcasting add/scale, reshape/transpose, row gather, RMS norm,
causal attention, softmax, column gather, the routed expert mixture and
cross-entropy.
"""

from __future__ import annotations

import threading
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class Tensor:
    """float64 array, optionally a node on the active tape."""

    __slots__ = ("data", "requires_grad", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records ops in execution order. Single-owner; do not share across threads."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._prev = None

    def watch(self, array, name: str | None = None) -> Tensor:
        """Register ``array`` as a differentiable leaf."""
        t = Tensor(array, requires_grad=True, name=name)
        t.tape = self
        self.leaves.append(t)
        return t

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _checked(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _emit(op: str, out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    """Wrap ``out``; record ``vjp`` if some input is tracked on the active tape."""
    res = Tensor(_checked(out, op))
    tape = active_tape()
    if tape is None:
        return res
    if any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        res.requires_grad = True
        res.tape = tape
        tape.nodes.append(_Node(res, inputs, vjp))
    return res


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementary ops ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    A, B = _data(a), _data(b)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {A.shape} x {B.shape}")
    out = A @ B

    def vjp(g):
        return (
            _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape),
            _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape),
        )

    return _emit("matmul", out, (a, b), vjp)


def add(a, b) -> Tensor:
    A, B = _data(a), _data(b)
    out = A + B
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, A.shape), _unbroadcast(g, B.shape)))


def scale(a, c: float) -> Tensor:
    return _emit("scale", _data(a) * c, (a,), lambda g: (g * c,))


def reshape(a, shape) -> Tensor:
    A = _data(a)
    return _emit("reshape", A.reshape(shape), (a,), lambda g: (g.reshape(A.shape),))


def transpose(a, axes) -> Tensor:
    inv = np.argsort(axes)
    return _emit("transpose", _data(a).transpose(axes), (a,), lambda g: (g.transpose(inv),))


def gather_rows(table, idx) -> Tensor:
    """``table[idx]`` for an integer index array (embedding lookup)."""
    W = _data(table)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        gw = np.zeros_like(W)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, W.shape[-1]))
        return (gw,)

    return _emit("gather_rows", W[idx], (table,), vjp)


def take_rows(x, n: int) -> Tensor:
    """Leading ``n`` rows."""
    X = _data(x)

    def vjp(g):
        gx = np.zeros_like(X)
        gx[:n] = g
        return (gx,)

    return _emit("take_rows", X[:n], (x,), vjp)


def take_cols(x, idx) -> Tensor:
    """Per-row column gather: ``out[r, j] = x[r, idx[r, j]]``."""
    X = _data(x)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(X)
        rows = np.arange(X.shape[0])[:, None]
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _emit("take_cols", np.take_along_axis(X, idx, axis=-1), (x,), vjp)


def mean(a, axis=None) -> Tensor:
    A = _data(a)
    out = A.mean(axis=axis)
    count = A.size if axis is None else A.shape[axis]

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, A.shape).copy(),)

    return _emit("mean", np.asarray(out), (a,), vjp)


def vdot(a, const) -> Tensor:
    """Scalar ``sum(a * const)`` with ``const`` held fixed."""
    A, C = _data(a), np.asarray(const, dtype=DTYPE)
    return _emit("vdot", np.asarray(np.sum(A * C)), (a,), lambda g: (g * C,))


# -- normalization / softmax ------------------------------------------------


def softmax(v, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    V = _data(v)
    e = np.exp(V - V.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (v,), vjp)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    X, G = _data(x), _data(gain)
    r = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    xhat = X * r
    out = xhat * G

    def vjp(g):
        gy = g * G
        gx = r * (gy - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, G.shape)

    return _emit("rmsnorm", out, (x, gain), vjp)


def causal_attention(q, k, v) -> Tensor:
    """Masked scaled dot-product attention over (..., T, dh) tensors."""
    Q, K, Vv = _data(q), _data(k), _data(v)
    T = Q.shape[-2]
    sc = 1.0 / np.sqrt(Q.shape[-1])
    s = (Q @ np.swapaxes(K, -1, -2)) * sc
    mask = np.tril(np.ones((T, T), dtype=bool))
    s = np.where(mask, s, -np.inf)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ Vv

    def vjp(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(Vv, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        return gs @ K, np.swapaxes(gs, -1, -2) @ Q, gv

    return _emit("causal_attention", out, (q, k, v), vjp)


# -- experts ----------------------------------------------------------------


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def expert_mixture(h, gates, idx, w1, b1, w2, b2) -> Tensor:
    """
    Weighted sum of per-token expert FFNs.

    ``out[t] = sum_j gates[t, j] * E_{idx[t, j]}(h[t])`` with
    ``E_e(x) = silu(x @ w1[e] + b1[e]) @ w2[e] + b2[e]``. Slots are summed in
    index order ``j``, so the result does not depend on expert iteration order.
    ``idx`` is a constant; each expert appears at most once per row.
    """
    H, Gt = _data(h), _data(gates)
    W1, B1, W2, B2 = _data(w1), _data(b1), _data(w2), _data(b2)
    idx = np.asarray(idx, dtype=np.int64)
    T, K = idx.shape
    ys = np.zeros((T, K, H.shape[-1]))
    saved = []
    for e in range(W1.shape[0]):
        rows, slots = np.nonzero(idx == e)
        if rows.size == 0:
            continue
        x = H[rows]
        a = x @ W1[e] + B1[e]
        u, s = _silu(a)
        ys[rows, slots] = u @ W2[e] + B2[e]
        saved.append((e, rows, slots, x, a, u, s))
    out = np.einsum("tk,tkd->td", Gt, ys)

    def vjp(g):
        gh = np.zeros_like(H)
        gw1, gb1 = np.zeros_like(W1), np.zeros_like(B1)
        gw2, gb2 = np.zeros_like(W2), np.zeros_like(B2)
        ggates = np.einsum("td,tkd->tk", g, ys)
        for e, rows, slots, x, a, u, s in saved:
            gy = g[rows] * Gt[rows, slots][:, None]
            gw2[e] = u.T @ gy
            gb2[e] = gy.sum(axis=0)
            ga = (gy @ W2[e].T) * (s * (1.0 + a * (1.0 - s)))
            gw1[e] = x.T @ ga
            gb1[e] = ga.sum(axis=0)
            np.add.at(gh, rows, ga @ W1[e].T)
        return gh, ggates, None, gw1, gb1, gw2, gb2

    return _emit("expert_mixture", out, (h, gates, idx, w1, b1, w2, b2), vjp)


# -- loss -------------------------------------------------------------------


def cross_entropy(logits, targets, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax of ``logits``."""
    X = _data(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if X.ndim != 2 or targets.shape != (X.shape[0],):
        raise ValueError(f"logits {X.shape} incompatible with targets {targets.shape}")
    V = X.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target index outside [0, {V})")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    m = X.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(X - m).sum(axis=1))
    rows = np.arange(X.shape[0])
    nll = lse - X[rows, targets]
    denom = max(X.shape[0], 1) if reduction == "mean" else 1
    loss = nll.sum() / denom

    def vjp(g):
        p = np.exp(X - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / denom),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), vjp)


# -- reverse pass -----------------------------------------------------------


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor]):
    """
    Gradients of scalar ``loss`` with respect to the tensors in ``wrt``.

    Returns a dict when ``wrt`` is a mapping, otherwise a list in the same
    order. Each requested tensor must be a leaf watched on the tape that
    recorded ``loss``; a leaf the loss does not depend on gets an exact zero.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    named = isinstance(wrt, Mapping)
    targets = list(wrt.values()) if named else list(wrt)
    tape = loss.tape
    if tape is None:
        if targets:
            raise LookupError("loss was not recorded on a tape")
        return {} if named else []
    leaf_ids = {id(t) for t in tape.leaves}
    for t in targets:
        if id(t) not in leaf_ids:
            raise LookupError(f"{t!r} is not a leaf of this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.vjp(g)):
            if gx is None or not (isinstance(x, Tensor) and x.requires_grad):
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
    out = [grads.get(id(t), np.zeros_like(t.data)) for t in targets]
    if named:
        return dict(zip(wrt.keys(), out))
    return out
