"""Dense float64 tensors with a record-on-forward reverse-mode tape.

Operations record themselves on the innermost active :class:`Graph` (a
thread-local stack) when at least one operand requires a gradient.  With no
active graph nothing is recorded, which is how evaluation runs.

Most primitives accept a leading batch axis: ``[K]`` vectors and ``[B, K]``
row batches.  Row vectors of shape ``[K]`` broadcast over a ``[B, K]`` batch in
``add``/``sub``/``hadamard``/``film``; any other shape disagreement raises
:class:`DimensionError`.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "DiffTensor", "Graph", "DimensionError", "DegenerateVectorError", "EmptyInputError",
    "tensor", "param", "matmul", "linear", "add", "sub", "hadamard", "relu", "scale",
    "elementwise", "film", "layer_norm", "cosine_sim", "cosine_matrix",
    "softmax_cross_entropy", "l2_distance", "row_l2_distance", "mean", "sum_all",
    "global_norm", "weighted_sum", "take_row", "gather_rows", "mse",
]


class DimensionError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


DEGENERATE_NORM = 1e-12

_ids = itertools.count()


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, frozen: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.frozen = frozen
        self.requires_grad = requires_grad and not frozen
        self.grad = np.zeros_like(arr) if frozen else None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.frozen else None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = " frozen" if self.frozen else (" grad" if self.requires_grad else "")
        return f"DiffTensor(shape={self.shape}{tag}{', ' + self.name if self.name else ''})"


def tensor(data, name: str = "") -> DiffTensor:
    """Constant (untracked) tensor."""
    return DiffTensor(data, requires_grad=False, name=name)


def param(data, name: str = "") -> DiffTensor:
    return DiffTensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


class Graph:
    """Topologically ordered tape of primitive applications.

    Use as a context manager; ops executed inside are recorded in order.
    ``backward(loss)`` walks the tape once in reverse and accumulates
    gradients into every tracked, non-frozen operand.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, inputs, output, backward) -> None:
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: DiffTensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def _current() -> Graph | None:
    st = _stack()
    return st[-1] if st else None


def _make(out_data, inputs: Sequence[DiffTensor], backward: Callable) -> DiffTensor:
    needs = any(t.requires_grad for t in inputs)
    out = DiffTensor.__new__(DiffTensor)
    out.data = out_data
    out.grad = None
    out.frozen = False
    out.node_id = next(_ids)
    out.name = ""
    g = _current() if needs else None
    out.requires_grad = g is not None
    if g is not None:
        g.record(tuple(inputs), out, backward)
    return out


def _as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else tensor(x)


def _check_same(a: DiffTensor, b: DiffTensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.data.ndim == 2 and a.data.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), back)


def linear(x: DiffTensor, weight: DiffTensor, bias: DiffTensor) -> DiffTensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[in]`` or ``[B, in]``."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1] or bias.shape != (wd.shape[0],):
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}")
    out = xd @ wd.T + bias.data

    def back(g):
        if g.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(out, (x, weight, bias), back)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def hadamard(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: DiffTensor) -> DiffTensor:
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def scale(x: DiffTensor, s: float) -> DiffTensor:
    s = float(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def elementwise(op: str, *args):
    """Dispatch by name: ``add``, ``sub``, ``hadamard``, ``relu``, ``scale``."""
    table = {"add": add, "sub": sub, "hadamard": hadamard, "relu": relu, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def film(f: DiffTensor, gamma: DiffTensor, beta: DiffTensor) -> DiffTensor:
    """``relu((gamma + 1) * f + beta)``; gamma/beta may be ``[K]`` rows broadcast over ``[B, K]``."""
    _check_same(f, gamma, "film")
    _check_same(f, beta, "film")
    fd, gd = f.data, gamma.data
    pre = (gd + 1.0) * fd + beta.data
    mask = pre > 0.0

    def back(g):
        gm = g * mask
        return gm * (gd + 1.0), _unbroadcast(gm * fd, gd.shape), _unbroadcast(gm, beta.shape)

    return _make(np.where(mask, pre, 0.0), (f, gamma, beta), back)


# ---------------------------------------------------------------------------
# normalisation / similarity / losses
# ---------------------------------------------------------------------------

def layer_norm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Normalise over the last axis with population variance.

    A zero-variance row with ``eps == 0`` maps to ``bias`` (the centred values are
    all zero, so the row is defined as zeros before the affine part).
    """
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    k = x.shape[-1] if x.data.ndim else 0
    if k == 0:
        raise EmptyInputError("layer_norm: empty feature axis")
    if gain.shape != (k,) or bias.shape != (k,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
    vec = x.data.ndim == 1
    x2 = x.data[None, :] if vec else x.data
    out, xhat, inv_std = kernels.layer_norm_fwd(np.ascontiguousarray(x2), gain.data, bias.data, float(eps))
    gaind = gain.data

    def back(g):
        g2 = g[None, :] if vec else g
        dx, dgain, dbias = kernels.layer_norm_bwd(np.ascontiguousarray(g2), xhat, inv_std, gaind)
        return (dx[0] if vec else dx), dgain, dbias

    return _make(out[0] if vec else out, (x, gain, bias), back)


def cosine_matrix(f: DiffTensor, c: DiffTensor, strict: bool = False) -> DiffTensor:
    """Cosine similarity of every row of ``f`` [B, K] against every row of ``c`` [U, K].

    Norms are clamped at 1e-12.  With ``strict`` a degenerate row raises
    :class:`DegenerateVectorError` instead.
    """
    if f.data.ndim != 2 or c.data.ndim != 2 or f.shape[1] != c.shape[1]:
        raise DimensionError(f"cosine: incompatible shapes {f.shape} and {c.shape}")
    sim, fh, ch, nf, nc = kernels.cosine_fwd(np.ascontiguousarray(f.data), np.ascontiguousarray(c.data),
                                             DEGENERATE_NORM)
    if strict and (np.any(nf <= DEGENERATE_NORM) or np.any(nc <= DEGENERATE_NORM)):
        raise DegenerateVectorError("cosine similarity of a vector with norm below 1e-12")

    def back(g):
        return kernels.cosine_bwd(np.ascontiguousarray(g), fh, ch, nf, nc)

    return _make(sim, (f, c), back)


def cosine_sim(f: DiffTensor, v: DiffTensor) -> DiffTensor:
    if f.data.ndim != 1 or f.shape != v.shape:
        raise DimensionError(f"cosine_sim: incompatible shapes {f.shape} and {v.shape}")
    sim = cosine_matrix(_reshape(f, (1, -1)), _reshape(v, (1, -1)), strict=True)
    return _reshape(sim, ())


def _reshape(x: DiffTensor, shape) -> DiffTensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def softmax_cross_entropy(logits: DiffTensor, label) -> DiffTensor:
    """Mean over the batch of ``-log softmax(logits)[label]``; ``logits`` is [U] or [B, U]."""
    vec = logits.data.ndim == 1
    z = logits.data[None, :] if vec else logits.data
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    u = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0]} labels for {z.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= u):
        raise IndexError(f"label out of range [0, {u})")
    losses, probs = kernels.softmax_xent_fwd(np.ascontiguousarray(z), labels)
    b = z.shape[0]

    def back(g):
        rows = np.full(b, float(g) / b)
        d = kernels.softmax_xent_bwd(rows, probs, labels)
        return (d[0] if vec else d,)

    return _make(np.asarray(losses.mean()), (logits,), back)


def row_l2_distance(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Per-row Euclidean distance ``[B]``; zero distance has zero subgradient."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"row_l2_distance: incompatible shapes {a.shape} and {b.shape}")
    dist, diff = kernels.row_l2_fwd(np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))

    def back(g):
        da = kernels.row_l2_bwd(np.ascontiguousarray(g), diff, dist)
        return da, -da

    return _make(dist, (a, b), back)


def l2_distance(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape or a.data.ndim != 1:
        raise DimensionError(f"l2_distance: incompatible shapes {a.shape} and {b.shape}")
    d = row_l2_distance(_reshape(a, (1, -1)), _reshape(b, (1, -1)))
    return _reshape(d, ())


def mse(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _make(np.asarray((diff * diff).mean()), (a, b),
                 lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


# ---------------------------------------------------------------------------
# reductions, indexing
# ---------------------------------------------------------------------------

def mean(x: DiffTensor) -> DiffTensor:
    n = x.data.size
    shape = x.shape
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def sum_all(x: DiffTensor) -> DiffTensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def global_norm(tensors: Sequence[DiffTensor], squared: bool = False) -> DiffTensor:
    """Euclidean norm of all ``tensors`` flattened and concatenated (zero has zero subgradient)."""
    datas = [t.data for t in tensors]
    sq = float(sum((d * d).sum() for d in datas))
    if squared:
        return _make(np.asarray(sq), tuple(tensors), lambda g: tuple(2.0 * float(g) * d for d in datas))
    norm = np.sqrt(sq)

    def back(g):
        if norm == 0.0:
            return tuple(np.zeros_like(d) for d in datas)
        s = float(g) / norm
        return tuple(s * d for d in datas)

    return _make(np.asarray(norm), tuple(tensors), back)


def weighted_sum(terms: Sequence[tuple[float, DiffTensor]]) -> DiffTensor:
    """``sum(w * t)`` over scalar tensors, accumulated left to right."""
    total = 0.0
    for w, t in terms:
        total = total + w * t.data
    weights = [float(w) for w, _ in terms]
    return _make(np.asarray(total, dtype=np.float64), tuple(t for _, t in terms),
                 lambda g: tuple(w * g for w in weights))


def take_row(x: DiffTensor, i: int) -> DiffTensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _make(x.data[i].copy(), (x,), back)


def gather_rows(table: DiffTensor, idx) -> DiffTensor:
    """Rows ``table[idx]``; the gradient is scattered back (row-sparse)."""
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row id out of range [0, {n})")
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), back)
