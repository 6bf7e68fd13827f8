"""
Span-level grid tagging.

A sentence of n tokens is labelled by an n x n grid:

* the diagonal carries BIO tags typed by aspect (A) or opinion (O);
* for ASTE, a strictly-upper cell (r, c) carries the polarity of the pair
  whose earlier span starts at r and later span starts at c;
* for AESC, a multi-token aspect stores its polarity at (start, end) and a
  single-token aspect at its diagonal position, read by a separate head.

Every other upper cell is NONE.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Set, Tuple, Union

import numpy as np

from pair_absa.errors import DimensionError, EncodingConflictError

logger = logging.getLogger(__name__)

DIAG_LABELS = ["O", "B-A", "I-A", "B-O", "I-O"]
PAIR_LABELS = ["NONE", "POS", "NEU", "NEG"]
POLARITIES = PAIR_LABELS[1:]

O, B_A, I_A, B_O, I_O = range(5)
NONE = 0
IGNORE = -1

SpanKind = Literal["AT", "OT"]


@dataclass(frozen=True, order=True)
class Span:
    """Inclusive token range ``[start, end]``."""

    start: int
    end: int
    kind: SpanKind = "AT"

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid span [{self.start}, {self.end}]")

    def __len__(self) -> int:
        return self.end - self.start + 1

    def indices(self) -> List[int]:
        return list(range(self.start, self.end + 1))

    def overlaps(self, other: "Span") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass(frozen=True, order=True)
class Triplet:
    aspect: Span
    opinion: Span
    polarity: str

    def __post_init__(self) -> None:
        if self.polarity not in POLARITIES:
            raise ValueError(f"unknown polarity '{self.polarity}'")
        if self.aspect.overlaps(self.opinion):
            raise ValueError(f"aspect {self.aspect} and opinion {self.opinion} overlap")


@dataclass(frozen=True, order=True)
class AspectPolarity:
    aspect: Span
    polarity: str

    def __post_init__(self) -> None:
        if self.polarity not in POLARITIES:
            raise ValueError(f"unknown polarity '{self.polarity}'")


Gold = Union[Iterable[Triplet], Iterable[AspectPolarity]]


@dataclass
class TagGrid:
    """Labels (and optionally predicted scores) for one sentence.

    ``pair`` is n x n with IGNORE on and below the diagonal. ``diag_pola`` is
    used in AESC only. Score arrays are filled by the model at prediction
    time so decoding can take an argmax restricted to real polarities.
    """

    n: int
    diag: np.ndarray
    pair: np.ndarray
    diag_pola: np.ndarray
    pair_scores: Optional[np.ndarray] = field(default=None, repr=False)
    diag_pola_scores: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def empty(cls, n: int) -> "TagGrid":
        pair = np.full((n, n), IGNORE, dtype=np.int64)
        pair[np.triu_indices(n, k=1)] = NONE
        return cls(
            n=n,
            diag=np.zeros(n, dtype=np.int64),
            pair=pair,
            diag_pola=np.full(n, NONE, dtype=np.int64),
        )

    def upper_labels(self) -> np.ndarray:
        """Pair labels of the strict upper triangle, row-major."""
        return self.pair[np.triu_indices(self.n, k=1)]

    def diag_names(self) -> List[str]:
        return [DIAG_LABELS[k] for k in self.diag]


def upper_cells(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the strict upper triangle, row-major."""
    return np.triu_indices(n, k=1)


def _check_bounds(span: Span, n: int) -> None:
    if span.end >= n:
        raise DimensionError(f"span {span} exceeds a sentence of {n} tokens")


def _mark_spans(grid: TagGrid, spans: Sequence[Span]) -> None:
    owner: Dict[int, Span] = {}
    for span in sorted(set(spans)):
        for k in span.indices():
            if k in owner and owner[k] != span:
                raise EncodingConflictError("spans overlap on the diagonal", [owner[k], span])
            owner[k] = span
        begin, inside = (B_A, I_A) if span.kind == "AT" else (B_O, I_O)
        grid.diag[span.start] = begin
        grid.diag[span.start + 1 : span.end + 1] = inside


def _set_cell(
    cells: Dict[Tuple[int, int], object], key: Tuple[int, int], item: object, polarity: str
) -> None:
    previous = cells.get(key)
    if previous is not None and previous.polarity != polarity:  # type: ignore[attr-defined]
        raise EncodingConflictError(f"cell {key} needs two polarities", [previous, item])
    cells[key] = item


def pair_cell(aspect: Span, opinion: Span) -> Tuple[int, int]:
    """Cell holding the polarity of an aspect/opinion pair."""
    return (min(aspect.start, opinion.start), max(aspect.start, opinion.start))


def encode_grid(n: int, gold: Gold, task: str = "aste", opinions: Iterable[Span] = ()) -> TagGrid:
    """Build the gold grid of a sentence with ``n`` tokens.

    Args:
        n: Sentence length.
        gold: Triplets for ``task="aste"``, aspect polarities for ``"aesc"``.
        task: ``"aste"`` or ``"aesc"``.
        opinions: Extra opinion spans without pairs (AESC corpora that
            annotate opinion terms).

    Returns:
        TagGrid with BIO tags on the diagonal and polarities above it.

    Raises:
        EncodingConflictError: Spans overlap, or one cell needs two polarities.
        DimensionError: A span runs past the sentence.
    """
    grid = TagGrid.empty(n)
    items = list(gold)
    cells: Dict[Tuple[int, int], object] = {}
    if task == "aste":
        triplets = [t for t in items if isinstance(t, Triplet)]
        if len(triplets) != len(items):
            raise TypeError("ASTE gold must be a collection of Triplet")
        spans = [t.aspect for t in triplets] + [t.opinion for t in triplets] + list(opinions)
        for span in spans:
            _check_bounds(span, n)
        _mark_spans(grid, spans)
        for t in triplets:
            _set_cell(cells, pair_cell(t.aspect, t.opinion), t, t.polarity)
        for (r, c), t in cells.items():
            grid.pair[r, c] = PAIR_LABELS.index(t.polarity)  # type: ignore[attr-defined]
    elif task == "aesc":
        pairs = [p for p in items if isinstance(p, AspectPolarity)]
        if len(pairs) != len(items):
            raise TypeError("AESC gold must be a collection of AspectPolarity")
        spans = [p.aspect for p in pairs] + list(opinions)
        for span in spans:
            _check_bounds(span, n)
        _mark_spans(grid, spans)
        for p in pairs:
            _set_cell(cells, (p.aspect.start, p.aspect.end), p, p.polarity)
        for (r, c), p in cells.items():
            label = PAIR_LABELS.index(p.polarity)  # type: ignore[attr-defined]
            if r == c:
                grid.diag_pola[r] = label
            else:
                grid.pair[r, c] = label
    else:
        raise ValueError(f"unknown task '{task}'")
    return grid


def decode_spans(diag: Sequence[int], repair: str = "begin") -> Tuple[List[Span], List[Span]]:
    """BIO decoding of the diagonal into aspect and opinion spans.

    An orphan I-x (after O or after the other kind) opens a new span with
    ``repair="begin"`` and is ignored with ``repair="drop"``.
    """
    aspects: List[Span] = []
    opinions: List[Span] = []
    start: Optional[int] = None
    kind: Optional[str] = None

    def close(end: int) -> None:
        nonlocal start, kind
        if start is not None:
            target = aspects if kind == "AT" else opinions
            target.append(Span(start, end, kind))  # type: ignore[arg-type]
        start, kind = None, None

    for i, label in enumerate(int(k) for k in diag):
        if label == O:
            close(i - 1)
        elif label in (B_A, B_O):
            close(i - 1)
            start, kind = i, "AT" if label == B_A else "OT"
        else:
            label_kind = "AT" if label == I_A else "OT"
            if start is not None and kind == label_kind:
                continue
            close(i - 1)
            if repair == "begin":
                start, kind = i, label_kind
    close(len(diag) - 1)
    return aspects, opinions


def _polarity(label: int, scores: Optional[np.ndarray]) -> Optional[str]:
    if scores is not None:
        return POLARITIES[int(np.argmax(scores[1:]))]
    if label > NONE:
        return PAIR_LABELS[label]
    return None


def decode_grid(
    grid: TagGrid, task: str = "aste", repair: str = "begin"
) -> Union[Set[Triplet], Set[AspectPolarity]]:
    aspects, opinions = decode_spans(grid.diag, repair)
    if task == "aste":
        triplets: Set[Triplet] = set()
        for a in aspects:
            for o in opinions:
                r, c = pair_cell(a, o)
                label = int(grid.pair[r, c])
                if label > NONE:
                    triplets.add(Triplet(a, o, PAIR_LABELS[label]))
        return triplets
    if task == "aesc":
        pairs: Set[AspectPolarity] = set()
        for a in aspects:
            if a.start == a.end:
                label = int(grid.diag_pola[a.start])
                scores = grid.diag_pola_scores[a.start] if grid.diag_pola_scores is not None else None
            else:
                label = int(grid.pair[a.start, a.end])
                scores = grid.pair_scores[a.start, a.end] if grid.pair_scores is not None else None
            polarity = _polarity(label, scores)
            if polarity is not None:
                pairs.add(AspectPolarity(a, polarity))
        return pairs
    raise ValueError(f"unknown task '{task}'")
