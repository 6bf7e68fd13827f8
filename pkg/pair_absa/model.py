"""The dual encoder: token embedder, sequence and pair encoders, tagging heads."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Set, Union

import numpy as np

import pair_absa.numerics as nx
from pair_absa.config import ModelConfig
from pair_absa.data import Example
from pair_absa.embedding import TokenEmbedder, Vocab
from pair_absa.errors import DimensionError
from pair_absa.numerics import Tensor
from pair_absa.pair_encoder import PairEncoder, PairGridState
from pair_absa.params import ParamStore
from pair_absa.seq_encoder import LayerState, SequenceEncoder
from pair_absa.tagging import (
    DIAG_LABELS,
    IGNORE,
    NONE,
    PAIR_LABELS,
    AspectPolarity,
    Span,
    TagGrid,
    Triplet,
    decode_grid,
    decode_spans,
    upper_cells,
)

logger = logging.getLogger(__name__)


@dataclass
class ForwardOutput:
    term_logits: Tensor
    pair_logits: Optional[Tensor]
    diag_pola_logits: Optional[Tensor]
    states: List[LayerState]
    grid: PairGridState


@dataclass
class LossParts:
    total: Tensor
    term: Tensor
    pola: Tensor


@dataclass
class Prediction:
    aspects: List[Span] = field(default_factory=list)
    opinions: List[Span] = field(default_factory=list)
    triplets: Set[Triplet] = field(default_factory=set)
    pairs: Set[AspectPolarity] = field(default_factory=set)

    def items(self, task: str) -> Union[Set[Triplet], Set[AspectPolarity]]:
        return self.triplets if task == "aste" else self.pairs


def term_head(W: Tensor, b: Tensor, S_L: Tensor) -> Tensor:
    """Per-token logits over O, B-A, I-A, B-O, I-O."""
    return nx.add(nx.matmul(S_L, W), b)


def pair_head(W: Tensor, b: Tensor, P_L: Tensor) -> Tensor:
    """Logits over NONE, POS, NEU, NEG for every cell with j > i, row-major."""
    n, _, channels = P_L.shape
    rows, cols = upper_cells(n)
    flat = nx.reshape(P_L, (n * n, channels))
    return nx.add(nx.matmul(nx.take(flat, rows * n + cols), W), b)


def diag_pola_head(W: Tensor, b: Tensor, P_L: Tensor) -> Tensor:
    """Polarity logits read from the diagonal cells (single-token aspects)."""
    n, _, channels = P_L.shape
    flat = nx.reshape(P_L, (n * n, channels))
    return nx.add(nx.matmul(nx.take(flat, np.arange(n) * (n + 1)), W), b)


def joint_loss(
    term_logits: Tensor,
    pair_logits: Optional[Tensor],
    grid: TagGrid,
    mask: Optional[np.ndarray] = None,
    none_weight: float = 1.0,
    diag_pola_logits: Optional[Tensor] = None,
) -> LossParts:
    """Summed token cross-entropy plus summed cell cross-entropy.

    Cells and tokens outside ``mask`` are skipped; gold NONE cells are
    weighted by ``none_weight``. Without pair logits the polarity part is 0.
    """
    n = grid.n
    if term_logits.shape != (n, len(DIAG_LABELS)):
        raise DimensionError("term logits do not fit the grid", term_logits.shape, (n, len(DIAG_LABELS)))
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    token_weights = mask.astype(term_logits.dtype)
    term = nx.cross_entropy_rows(term_logits, grid.diag, token_weights)

    pola: Tensor = nx.constant(np.zeros((), dtype=term_logits.dtype))
    if pair_logits is not None:
        rows, cols = upper_cells(n)
        if pair_logits.shape != (len(rows), len(PAIR_LABELS)):
            raise DimensionError("pair logits do not fit the grid", pair_logits.shape, (len(rows), len(PAIR_LABELS)))
        gold = grid.pair[rows, cols]
        weights = np.where(gold == NONE, none_weight, 1.0) * (mask[rows] & mask[cols])
        if len(rows):
            pola = nx.cross_entropy_rows(pair_logits, gold, weights.astype(pair_logits.dtype))
    if diag_pola_logits is not None:
        gold_diag = grid.diag_pola
        weights = np.where(gold_diag == NONE, none_weight, 1.0) * mask
        diag_loss = nx.cross_entropy_rows(diag_pola_logits, gold_diag, weights.astype(diag_pola_logits.dtype))
        pola = nx.add(pola, diag_loss)
    return LossParts(total=nx.add(term, pola), term=term, pola=pola)


class DualEncoderModel:
    """Sequence and pair encoders sharing the token representation.

    Layer l reads the previous sequence state into the pair grid, then,
    with interaction on, adds a row-wise max-pool of that grid to the
    sequence state handed to layer l + 1 and to the heads.
    """

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocab,
        word_table: Optional[np.ndarray] = None,
        plm_dim: int = 0,
    ):
        self.config = config
        self.vocab = vocab
        self.plm_dim = plm_dim
        self.store = ParamStore(seed=config.seed, dtype=config.dtype)
        self.embedder = TokenEmbedder(self.store, config, vocab, word_table, plm_dim)
        self.encoder = SequenceEncoder(self.store, config.encoder_config())
        self.pair: Optional[PairEncoder] = PairEncoder(self.store, config) if config.use_pair_encoder else None
        d = config.hidden_dim
        self.W_term = self.store.create("head.term.W", (d, len(DIAG_LABELS)))
        self.b_term = self.store.create("head.term.b", (len(DIAG_LABELS),), init="zeros")
        self.W_pola: Optional[Tensor] = None
        self.b_pola: Optional[Tensor] = None
        self.W_diag: Optional[Tensor] = None
        self.b_diag: Optional[Tensor] = None
        if self.pair is not None:
            channels = self.pair.channels
            self.W_pola = self.store.create("head.pola.W", (channels, len(PAIR_LABELS)))
            self.b_pola = self.store.create("head.pola.b", (len(PAIR_LABELS),), init="zeros")
            if config.task == "aesc":
                self.W_diag = self.store.create("head.diag_pola.W", (channels, len(PAIR_LABELS)))
                self.b_diag = self.store.create("head.diag_pola.b", (len(PAIR_LABELS),), init="zeros")
        logger.info(
            f"Model: {len(self.store)} tensors, {self.store.size()} trainable values, "
            f"pair encoder {'on' if self.pair else 'off'} ({config.directions})"
        )

    def forward(
        self,
        tokens: List[str],
        contextual: Optional[np.ndarray] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        example_id: str = "<sentence>",
    ) -> ForwardOutput:
        """Run both encoders and every head over one sentence.

        Args:
            tokens: The sentence, one string per token.
            contextual: ``n x plm_dim`` precomputed token vectors; required
                when the model was built with contextual input.
            training: Enables dropout, which then draws from ``rng``.
            rng: Generator for dropout masks.
            example_id: Named in alignment errors.

        Returns:
            ForwardOutput with the term logits, the pair (and AESC diagonal)
            polarity logits, every sequence state and every pair grid.
        """
        x = self.embedder(tokens, contextual, example_id)
        grid = PairGridState(mode=self.config.directions, hidden=self.config.pair_hidden_dim)
        pair = self.pair

        def interleave(index: int, S_before: Tensor, S_after: Tensor) -> Tensor:
            P_prev = grid.P[-1] if grid.P else None
            P = pair.layer(index, S_before, P_prev)  # type: ignore[union-attr]
            grid.P.append(P)
            return pair.interact(index, P, S_after)  # type: ignore[union-attr]

        states = self.encoder.encode_sequence(
            x, None, training, rng, interleave if pair is not None else None
        )
        term_logits = term_head(self.W_term, self.b_term, states[-1].S)
        pair_logits = diag_logits = None
        if self.pair is not None:
            P_L = grid.P[-1]
            pair_logits = pair_head(self.W_pola, self.b_pola, P_L)  # type: ignore[arg-type]
            if self.W_diag is not None:
                diag_logits = diag_pola_head(self.W_diag, self.b_diag, P_L)  # type: ignore[arg-type]
        return ForwardOutput(term_logits, pair_logits, diag_logits, states, grid)

    def loss(self, out: ForwardOutput, grid: TagGrid) -> LossParts:
        return joint_loss(
            out.term_logits,
            out.pair_logits,
            grid,
            none_weight=self.config.none_weight,
            diag_pola_logits=out.diag_pola_logits,
        )

    def predicted_grid(self, out: ForwardOutput) -> TagGrid:
        n = out.term_logits.shape[0]
        grid = TagGrid.empty(n)
        grid.diag = np.argmax(out.term_logits.data, axis=1)
        if out.pair_logits is not None:
            rows, cols = upper_cells(n)
            scores = np.zeros((n, n, len(PAIR_LABELS)))
            scores[rows, cols] = out.pair_logits.data
            grid.pair = np.full((n, n), IGNORE, dtype=np.int64)
            grid.pair[rows, cols] = np.argmax(out.pair_logits.data, axis=1)
            grid.pair_scores = scores
        if out.diag_pola_logits is not None:
            grid.diag_pola = np.argmax(out.diag_pola_logits.data, axis=1)
            grid.diag_pola_scores = out.diag_pola_logits.data
        return grid

    def predict(self, example: Example) -> Prediction:
        out = self.forward(example.tokens, example.contextual, training=False, example_id=example.id)
        grid = self.predicted_grid(out)
        repair = self.config.bio_repair
        aspects, opinions = decode_spans(grid.diag, repair)
        prediction = Prediction(aspects=aspects, opinions=opinions)
        if self.pair is None:
            return prediction
        if self.config.task == "aste":
            prediction.triplets = decode_grid(grid, "aste", repair)  # type: ignore[assignment]
        else:
            prediction.pairs = decode_grid(grid, "aesc", repair)  # type: ignore[assignment]
        return prediction
