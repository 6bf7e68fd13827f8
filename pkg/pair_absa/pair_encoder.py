"""
Pair encoder over the n x n word-pair grid.

Each layer first builds ``S'[i, j] = ReLU(MLP([S[i]; S[j]]))`` from the
previous sequence state, then contextualises the grid with a
multi-dimensional GRU: cell (i, j) reads its input, the same cell of the
previous layer and its row and column predecessors along the scan
direction. The three context vectors are mixed by a softmax over three
learned scalar gates into one state for a standard GRU update.

Scans start from a grid corner:

    "se"  top-left to bottom-right
    "nw"  bottom-right to top-left
    "sw"  top-right to bottom-left
    "ne"  bottom-left to top-right

Every scan is run on a flipped grid with the "se" recurrence, so cells on
one anti-diagonal never depend on each other and may be computed together.
"""

import contextvars
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import pair_absa.numerics as nx
from pair_absa.config import ModelConfig
from pair_absa.errors import ConfigError, DimensionError
from pair_absa.numerics import Tensor
from pair_absa.params import ParamStore

logger = logging.getLogger(__name__)

DIRECTION_FLIPS: Dict[str, Tuple[int, ...]] = {
    "se": (),
    "nw": (0, 1),
    "sw": (1,),
    "ne": (0,),
}

MODE_DIRECTIONS: Dict[str, Tuple[str, ...]] = {
    "uni": ("se",),
    "bi": ("se", "nw"),
    "quad": ("se", "nw", "sw", "ne"),
}

Cell = Tuple[int, int]


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchedulePlan:
    """Stages run in order; the chunks of one stage are mutually independent."""

    n: int
    workers: int
    stages: Tuple[Tuple[Tuple[Cell, ...], ...], ...]

    @property
    def diagonal_sizes(self) -> List[int]:
        return [len(d) for d in anti_diagonals(self.n)]

    def order(self) -> List[Cell]:
        return [cell for stage in self.stages for chunk in stage for cell in chunk]


def anti_diagonals(n: int) -> List[List[Cell]]:
    return [[(i, t - i) for i in range(max(0, t - n + 1), min(t, n - 1) + 1)] for t in range(2 * n - 1)]


def wavefront_schedule(n: int, workers: int) -> SchedulePlan:
    """Execution plan for an n x n scan.

    One worker gives plain row-major order, one cell per stage. More
    workers give one stage per anti-diagonal, split into at most
    ``workers`` contiguous chunks.
    """
    if n < 1:
        raise ConfigError(f"grid size must be positive, got {n}")
    if workers < 1:
        raise ConfigError(f"need at least one worker, got {workers}")
    if workers == 1:
        stages = tuple(((cell,),) for cell in ((i, j) for i in range(n) for j in range(n)))
        return SchedulePlan(n=n, workers=1, stages=stages)
    planned = []
    for diagonal in anti_diagonals(n):
        pieces = np.array_split(np.arange(len(diagonal)), min(workers, len(diagonal)))
        planned.append(tuple(tuple(diagonal[k] for k in piece) for piece in pieces))
    return SchedulePlan(n=n, workers=workers, stages=tuple(planned))


def diagonal_plan(n: int) -> SchedulePlan:
    """Each anti-diagonal computed as one vectorised chunk, no threads."""
    if n < 1:
        raise ConfigError(f"grid size must be positive, got {n}")
    return SchedulePlan(n=n, workers=0, stages=tuple((tuple(d),) for d in anti_diagonals(n)))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class GRUCellParams:
    Wx: Tensor  # input -> update, reset, candidate
    Us: Tensor  # combined state -> update, reset
    Uc: Tensor  # reset state -> candidate
    b: Tensor
    Wg: Tensor  # input -> three context gates
    Ug: Tensor  # each context -> its own gate
    bg: Tensor

    @property
    def hidden(self) -> int:
        return self.Uc.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, input_dim: int, hidden: int) -> "GRUCellParams":
        return cls(
            Wx=store.create(f"{prefix}.Wx", (input_dim, 3 * hidden)),
            Us=store.create(f"{prefix}.Us", (hidden, 2 * hidden)),
            Uc=store.create(f"{prefix}.Uc", (hidden, hidden)),
            b=store.create(f"{prefix}.b", (3 * hidden,), init="zeros"),
            Wg=store.create(f"{prefix}.Wg", (input_dim, 3)),
            Ug=store.create(f"{prefix}.Ug", (3, hidden)),
            bg=store.create(f"{prefix}.bg", (3,), init="zeros"),
        )


@dataclass
class PairInitParams:
    W_left: Tensor
    W_right: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d: int, d_pair: int) -> "PairInitParams":
        return cls(
            W_left=store.create(f"{prefix}.W_left", (d, d_pair)),
            W_right=store.create(f"{prefix}.W_right", (d, d_pair)),
            b1=store.create(f"{prefix}.b1", (d_pair,), init="zeros"),
            W2=store.create(f"{prefix}.W2", (d_pair, d_pair)),
            b2=store.create(f"{prefix}.b2", (d_pair,), init="zeros"),
        )


@dataclass
class PairGridState:
    P: List[Tensor] = field(default_factory=list)
    mode: str = "quad"
    hidden: int = 0

    @property
    def channels(self) -> int:
        return self.hidden * len(MODE_DIRECTIONS[self.mode])


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def pair_init(params: PairInitParams, S_prev: Tensor) -> Tensor:
    """``n x n x d_pair`` grid with cell (i, j) built from ``[S[i]; S[j]]``."""
    n = S_prev.shape[0]
    d_pair = params.W2.shape[0]
    left = nx.reshape(nx.matmul(S_prev, params.W_left), (n, 1, d_pair))
    right = nx.reshape(nx.matmul(S_prev, params.W_right), (1, n, d_pair))
    hidden = nx.relu(nx.add(nx.add(left, right), params.b1))
    return nx.relu(nx.add(nx.matmul(hidden, params.W2), params.b2))


def gru_cell(params: GRUCellParams, x_gates: Tensor, x_context: Tensor, contexts: Sequence[Tensor]) -> Tensor:
    """One GRU step for a batch of cells.

    ``x_gates`` is ``x Wx + b`` and ``x_context`` is ``x Wg`` for the rows;
    ``contexts`` are the previous-layer, row and column neighbour states.
    """
    h = params.hidden
    m = x_gates.shape[0]
    C = nx.stack(list(contexts), axis=1)
    scores = nx.add(nx.add(x_context, nx.reduce_sum(nx.mul(C, params.Ug), axis=2)), params.bg)
    alpha = nx.softmax(scores, axis=-1)
    s = nx.reduce_sum(nx.mul(C, nx.reshape(alpha, (m, 3, 1))), axis=1)
    gs = nx.matmul(s, params.Us)
    z = nx.sigmoid(nx.add(nx.narrow(x_gates, 1, 0, h), nx.narrow(gs, 1, 0, h)))
    r = nx.sigmoid(nx.add(nx.narrow(x_gates, 1, h, 2 * h), nx.narrow(gs, 1, h, 2 * h)))
    cand = nx.tanh(nx.add(nx.narrow(x_gates, 1, 2 * h, 3 * h), nx.matmul(nx.mul(r, s), params.Uc)))
    return nx.add(nx.mul(z, s), nx.mul(nx.sub(1.0, z), cand))


def _scan(
    params: GRUCellParams,
    S_flat: Tensor,
    prev_flat: Optional[Tensor],
    n: int,
    plan: SchedulePlan,
    pool: Optional[ThreadPoolExecutor],
) -> Tensor:
    h = params.hidden
    dtype = params.Wx.dtype
    gates = nx.add(nx.matmul(S_flat, params.Wx), params.b)
    context_gates = nx.matmul(S_flat, params.Wg)
    parts: List[Tensor] = []
    part_rows: List[np.ndarray] = []
    where = np.full((n * n, 2), -1, dtype=np.int64)

    def neighbour(picks: np.ndarray) -> Tensor:
        used = sorted(set(int(s) for s in picks[:, 0] if s >= 0))
        remap = {s: k for k, s in enumerate(used)}
        local = picks.copy()
        for row in range(local.shape[0]):
            if local[row, 0] >= 0:
                local[row, 0] = remap[int(local[row, 0])]
        return nx.gather_rows([parts[s] for s in used], local, h, dtype)

    def run(chunk: Tuple[Cell, ...]) -> Tensor:
        cells = np.array(chunk, dtype=np.int64).reshape(-1, 2)
        rows = cells[:, 0] * n + cells[:, 1]
        up = np.where((cells[:, 0] > 0)[:, None], where[np.maximum(rows - n, 0)], -1)
        left = np.where((cells[:, 1] > 0)[:, None], where[np.maximum(rows - 1, 0)], -1)
        if prev_flat is None:
            prev = nx.constant(np.zeros((len(rows), h), dtype=dtype))
        else:
            prev = nx.take(prev_flat, rows)
        return gru_cell(
            params,
            nx.take(gates, rows),
            nx.take(context_gates, rows),
            [prev, neighbour(up), neighbour(left)],
        )

    for stage in plan.stages:
        if pool is not None and len(stage) > 1:
            futures = [pool.submit(contextvars.copy_context().run, run, chunk) for chunk in stage]
            outputs = [f.result() for f in futures]
        else:
            outputs = [run(chunk) for chunk in stage]
        for chunk, out in zip(stage, outputs):
            rows = np.array([i * n + j for i, j in chunk], dtype=np.int64)
            where[rows, 0] = len(parts)
            where[rows, 1] = np.arange(len(rows))
            parts.append(out)
            part_rows.append(rows)
    return nx.assemble(parts, part_rows, n * n)


def mdgru_forward(
    params: GRUCellParams,
    S_prime: Tensor,
    P_prev: Optional[Tensor],
    direction: str = "se",
    workers: int = 0,
) -> Tensor:
    """Scan one direction over the grid; ``n x n x h``.

    ``workers=0`` computes each anti-diagonal as one vectorised chunk,
    ``workers=1`` walks cells in row-major order and ``workers>1`` splits
    each anti-diagonal over a thread pool. All three give the same values.
    """
    if direction not in DIRECTION_FLIPS:
        raise ConfigError(f"unknown scan direction '{direction}'")
    if S_prime.ndim != 3 or S_prime.shape[0] != S_prime.shape[1]:
        raise DimensionError("pair grid must be n x n x d", S_prime.shape)
    n, d_pair = S_prime.shape[0], S_prime.shape[2]
    h = params.hidden
    if P_prev is not None and P_prev.shape != (n, n, h):
        raise DimensionError("previous-layer grid has the wrong shape", P_prev.shape, (n, n, h))
    axes = DIRECTION_FLIPS[direction]
    S_flat = nx.reshape(nx.flip(S_prime, axes), (n * n, d_pair))
    prev_flat = None if P_prev is None else nx.reshape(nx.flip(P_prev, axes), (n * n, h))
    plan = diagonal_plan(n) if workers == 0 else wavefront_schedule(n, workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = _scan(params, S_flat, prev_flat, n, plan, pool)
    else:
        out = _scan(params, S_flat, prev_flat, n, plan, None)
    return nx.flip(nx.reshape(out, (n, n, h)), axes)


def mdgru_multi(
    cells: Sequence[GRUCellParams],
    S_prime: Tensor,
    P_prev: Optional[Tensor],
    mode: str = "quad",
    workers: int = 0,
) -> Tensor:
    """Concatenate the scans of ``mode`` along channels (order: se, nw, sw, ne).

    ``cells`` holds one parameter set per scan; ``P_prev`` is the previous
    layer's concatenated output, each scan reading its own channel block.
    """
    if mode not in MODE_DIRECTIONS:
        raise ConfigError(f"unknown direction mode '{mode}'")
    directions = MODE_DIRECTIONS[mode]
    if len(cells) != len(directions):
        raise ConfigError(f"mode '{mode}' needs {len(directions)} cells, got {len(cells)}")
    outputs = []
    for k, (direction, params) in enumerate(zip(directions, cells)):
        h = params.hidden
        prev = None if P_prev is None else nx.narrow(P_prev, 2, k * h, (k + 1) * h)
        outputs.append(mdgru_forward(params, S_prime, prev, direction, workers))
    return nx.concat(outputs, axis=2)


def interaction(W: Optional[Tensor], P: Tensor, S: Tensor) -> Tensor:
    """``S + max_j (P[i, j] W)`` over cells with ``j >= i``; ``S`` itself when ``W`` is None."""
    if W is None:
        return S
    n, _, channels = P.shape
    d = W.shape[1]
    projected = nx.reshape(nx.matmul(nx.reshape(P, (n * n, channels)), W), (n, n, d))
    upper = np.triu(np.ones((n, n), dtype=bool))[:, :, None]
    return nx.add(S, nx.masked_max(projected, upper, axis=1))


# ---------------------------------------------------------------------------
# reference implementation
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def mdgru_reference(
    params: GRUCellParams, S_prime: np.ndarray, P_prev: Optional[np.ndarray], direction: str = "se"
) -> np.ndarray:
    """Cell-by-cell numpy evaluation of ``mdgru_forward``, no tape."""
    axes = DIRECTION_FLIPS[direction]
    n = S_prime.shape[0]
    h = params.hidden
    X = np.flip(S_prime, axes)
    prev_grid = np.zeros((n, n, h)) if P_prev is None else np.flip(P_prev, axes)
    Wx, Us, Uc, b = params.Wx.data, params.Us.data, params.Uc.data, params.b.data
    Wg, Ug, bg = params.Wg.data, params.Ug.data, params.bg.data
    out = np.zeros((n, n, h))
    for i in range(n):
        for j in range(n):
            x = X[i, j]
            contexts = [
                prev_grid[i, j],
                out[i - 1, j] if i > 0 else np.zeros(h),
                out[i, j - 1] if j > 0 else np.zeros(h),
            ]
            scores = x @ Wg + bg
            for k in range(3):
                scores[k] += np.dot(contexts[k], Ug[k])
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            s = np.zeros(h)
            for k in range(3):
                s += weights[k] * contexts[k]
            gx = x @ Wx + b
            gs = s @ Us
            z = _sigmoid(gx[:h] + gs[:h])
            r = _sigmoid(gx[h : 2 * h] + gs[h:])
            cand = np.tanh(gx[2 * h :] + (r * s) @ Uc)
            out[i, j] = z * s + (1.0 - z) * cand
    return np.flip(out, axes)


# ---------------------------------------------------------------------------
# the encoder
# ---------------------------------------------------------------------------


class PairEncoder:
    """Per-layer pair initialisation, directional 2-D GRU and interaction weights."""

    def __init__(self, store: ParamStore, config: ModelConfig, prefix: str = "pair"):
        self.config = config
        self.mode = config.directions
        self.hidden = config.pair_hidden_dim
        d, d_pair = config.hidden_dim, config.resolved_pair_dim
        directions = MODE_DIRECTIONS[self.mode]
        self.inits: List[PairInitParams] = []
        self.cells: List[List[GRUCellParams]] = []
        self.interactions: List[Optional[Tensor]] = []
        for l in range(config.n_layers):
            p = f"{prefix}.layer{l}"
            self.inits.append(PairInitParams.create(store, f"{p}.init", d, d_pair))
            if config.share_direction_weights:
                shared = GRUCellParams.create(store, f"{p}.gru", d_pair, self.hidden)
                self.cells.append([shared] * len(directions))
            else:
                self.cells.append(
                    [GRUCellParams.create(store, f"{p}.gru.{dn}", d_pair, self.hidden) for dn in directions]
                )
            self.interactions.append(
                store.create(f"{p}.interaction.W", (self.hidden * len(directions), d))
                if config.use_interaction
                else None
            )

    @property
    def channels(self) -> int:
        return self.hidden * len(MODE_DIRECTIONS[self.mode])

    def layer(self, index: int, S_prev: Tensor, P_prev: Optional[Tensor]) -> Tensor:
        S_prime = pair_init(self.inits[index], S_prev)
        return mdgru_multi(self.cells[index], S_prime, P_prev, self.mode, self.config.mdgru_workers)

    def interact(self, index: int, P: Tensor, S: Tensor) -> Tensor:
        return interaction(self.interactions[index], P, S)
