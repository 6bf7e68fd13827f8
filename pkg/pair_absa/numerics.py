"""
Dense tensor arithmetic with a define-by-run reverse-mode tape.

A Tensor wraps a numpy array. While a Graph is active (``with Graph() as g``)
every op whose inputs require gradients appends an OpRecord holding the
backward rule; ``g.backward(loss)`` then walks the records in reverse
creation order, which is a reverse topological order of the computation.
Outside any graph the same ops only compute the forward value.

The active graph lives in a context variable, so worker threads that run
``contextvars.copy_context().run(...)`` record onto the caller's graph.
"""

import contextvars
import hashlib
import itertools
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from pair_absa.errors import DimensionError, LabelError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_node_ids = itertools.count(1)
_node_lock = threading.Lock()
_active_graph: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar(
    "pair_absa_active_graph", default=None
)


def _next_node_id() -> int:
    with _node_lock:
        return next(_node_ids)


class Tensor:
    """A dense array plus its identity in the computation graph."""

    __slots__ = ("data", "node_id", "requires_grad", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = _next_node_id() if requires_grad else None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, node={self.node_id})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass
class OpRecord:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Graph:
    """Explicit tape of op records for one forward pass.

    With ``record=False`` nothing is taped; the graph only collects branch
    fingerprints (ReLU masks, max winners), which the gradient checker uses
    to detect evaluations that straddle a kink.
    """

    def __init__(self, record: bool = True):
        self.record_ops = record
        self.records: List[OpRecord] = []
        self.stochastic = False
        self._branches = hashlib.sha1()
        self._lock = threading.Lock()
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _active_graph.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        with self._lock:
            output.requires_grad = True
            output.node_id = _next_node_id()
            self.records.append(OpRecord(kind, inputs, output, backward))

    def note_branch(self, kind: str, pattern: np.ndarray) -> None:
        with self._lock:
            self._branches.update(kind.encode())
            self._branches.update(np.ascontiguousarray(pattern).tobytes())

    def branch_signature(self) -> str:
        return self._branches.hexdigest()

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Return d(loss)/d(node) for every leaf reached, keyed by node id."""
        if loss.data.size != 1:
            raise DimensionError("backward needs a scalar loss", loss.shape)
        if loss.node_id is None:
            return {}
        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output.node_id, None)  # type: ignore[arg-type]
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad or inp.node_id is None:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        return grads


def active_graph() -> Optional[Graph]:
    return _active_graph.get()


def _make(kind: str, inputs: Tuple[Tensor, ...], out: np.ndarray, backward: BackwardFn) -> Tensor:
    result = Tensor(out)
    graph = _active_graph.get()
    if graph is not None and graph.record_ops and any(t.requires_grad for t in inputs):
        graph.append(kind, inputs, result, backward)
    return result


def _note(kind: str, pattern: np.ndarray) -> None:
    graph = _active_graph.get()
    if graph is not None:
        graph.note_branch(kind, pattern)


def constant(data: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    """Wrap data without a gradient; floating arrays keep their dtype, anything else becomes float64."""
    if isinstance(data, Tensor):
        return data
    if dtype is None:
        array = np.asarray(data)
        return Tensor(array if np.issubdtype(array.dtype, np.floating) else array.astype(np.float64))
    return Tensor(np.asarray(data, dtype=dtype))


def _coerce(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return constant(a), constant(b)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise DimensionError(f"{kind}: shapes do not broadcast", a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a weight shared by every leading index of ``a``) or
    has the same leading batch shape as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul: inner dimensions disagree", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul: batch dimensions disagree", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dA = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2:
            dB = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            dB = np.swapaxes(A, -1, -2) @ g
        return dA, dB

    return _make("matmul", (a, b), A @ B, backward)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _coerce(a, b)
    _check_broadcast("add", ta, tb)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _make("add", (ta, tb), ta.data + tb.data, backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _coerce(a, b)
    _check_broadcast("sub", ta, tb)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, ta.shape), -_unbroadcast(g, tb.shape)

    return _make("sub", (ta, tb), ta.data - tb.data, backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _coerce(a, b)
    _check_broadcast("mul", ta, tb)
    A, B = ta.data, tb.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * B, ta.shape), _unbroadcast(g * A, tb.shape)

    return _make("mul", (ta, tb), A * B, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * factor,)

    return _make("scale", (x,), (x.data * factor).astype(x.dtype, copy=False), backward)


def reduce_sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("reduce_sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    _note("relu", active)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * active,)

    return _make("relu", (x,), np.where(active, x.data, 0.0).astype(x.dtype), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * (1.0 - y * y),)

    return _make("tanh", (x,), y, backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * y * (1.0 - y),)

    return _make("sigmoid", (x,), y.astype(x.dtype), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity (same object) when not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    graph = _active_graph.get()
    if graph is not None:
        graph.stochastic = True
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * keep,)

    return _make("dropout", (x,), x.data * keep, backward)


# ---------------------------------------------------------------------------
# normalisation and probabilities
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Stable softmax; entries where ``mask`` is False count as minus infinity."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make("softmax", (x,), y, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm: gain/bias must match the last axis", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    G = gain.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * G
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", (x, gain, bias), xhat * G + bias.data, backward)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, gold: int) -> Tensor:
    """-log softmax(logits)[gold] for a single logit vector."""
    if logits.ndim != 1:
        raise DimensionError("cross_entropy expects a logit vector", logits.shape)
    return cross_entropy_rows(reshape(logits, (1, logits.shape[0])), np.array([gold]))


def cross_entropy_rows(
    logits: Tensor, gold: np.ndarray, weights: Optional[np.ndarray] = None
) -> Tensor:
    """Summed (optionally weighted) cross-entropy over the rows of ``logits``."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy_rows expects rows of logits", logits.shape)
    m, c = logits.shape
    gold = np.asarray(gold, dtype=np.int64).reshape(-1)
    if gold.shape[0] != m:
        raise DimensionError("cross_entropy_rows: one gold label per row", logits.shape, gold.shape)
    bad = (gold < 0) | (gold >= c)
    if bad.any():
        raise LabelError(int(gold[np.argmax(bad)]), c)
    w = np.ones(m, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    logp = _log_softmax_rows(logits.data)
    rows = np.arange(m)
    loss = -np.sum(w * logp[rows, gold])

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d = np.exp(logp)
        d[rows, gold] -= 1.0
        return (g * w[:, None] * d,)

    return _make("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(original),)

    return _make("reshape", (x,), x.data.reshape(shape), backward)


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _make("transpose", (x,), np.transpose(x.data, axes), backward)


def flip(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    if not axes:
        return x

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.flip(g, axes),)

    return _make("flip", (x,), np.ascontiguousarray(np.flip(x.data, axes)), backward)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``start:stop`` along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)
    shape = x.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _make("narrow", (x,), x.data[key], backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of nothing")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[k] != ref[k] for k in range(ndim) if k != ax):
            raise DimensionError("concat: non-concatenated dimensions disagree", ref, t.shape)
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> List[np.ndarray]:
        return np.split(g, bounds, axis=ax)

    return _make("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=ax), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError("stack: shapes disagree", ref, t.shape)
    n = len(tensors)

    def backward(g: np.ndarray) -> List[np.ndarray]:
        return [np.take(g, k, axis=axis) for k in range(n)]

    return _make("stack", tuple(tensors), np.stack([t.data for t in tensors], axis=axis), backward)


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``x`` (axis 0) selected by an integer index array of any shape."""
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take", (x,), x.data[idx], backward)


def gather_rows(
    sources: Sequence[Tensor], picks: np.ndarray, width: int, dtype: np.dtype = np.dtype(np.float64)
) -> Tensor:
    """Assemble rows from several 2-D sources.

    ``picks[k] = (s, r)`` copies row ``r`` of ``sources[s]``; ``s == -1``
    yields a zero row.
    """
    picks = np.asarray(picks, dtype=np.int64).reshape(-1, 2)
    out = np.zeros((picks.shape[0], width), dtype=dtype)
    selections = []
    for s, src in enumerate(sources):
        where = np.nonzero(picks[:, 0] == s)[0]
        rows = picks[where, 1]
        if where.size:
            out[where] = src.data[rows]
        selections.append((where, rows, src.shape))

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        grads: List[Optional[np.ndarray]] = []
        for where, rows, shape in selections:
            if not where.size:
                grads.append(None)
                continue
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, rows, g[where])
            grads.append(full)
        return grads

    return _make("gather_rows", tuple(sources), out, backward)


def assemble(parts: Sequence[Tensor], rows: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Scatter 2-D parts into disjoint rows of an ``n_rows``-row matrix."""
    width = parts[0].shape[1]
    out = np.zeros((n_rows, width), dtype=parts[0].dtype)
    index = [np.asarray(r, dtype=np.int64) for r in rows]
    for part, r in zip(parts, index):
        out[r] = part.data

    def backward(g: np.ndarray) -> List[np.ndarray]:
        return [g[r] for r in index]

    return _make("assemble", tuple(parts), out, backward)


def masked_max(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Max over ``axis`` restricted to ``mask``; all-masked slices give 0."""
    ax = axis % x.ndim
    mask = np.broadcast_to(mask, x.shape)
    z = np.where(mask, x.data, -np.inf)
    winner = np.expand_dims(np.argmax(z, axis=ax), ax)
    any_valid = np.expand_dims(mask.any(axis=ax), ax)
    _note("max", winner)
    out = np.where(any_valid, np.take_along_axis(x.data, winner, axis=ax), 0.0)
    shape = x.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, winner, np.expand_dims(g, ax) * any_valid, axis=ax)
        return (full,)

    return _make("masked_max", (x,), np.squeeze(out, axis=ax).astype(x.dtype), backward)


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


def masked_fill(x: Tensor, mask: np.ndarray, value: float = 0.0) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; no gradient flows there."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    keep = ~mask

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * keep,)

    return _make("masked_fill", (x,), np.where(mask, value, x.data).astype(x.dtype), backward)


def embed(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Lookup rows of an embedding table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError("embed: index outside the table", table.shape, idx.shape)
    return take(table, idx)
