"""
Reading and writing ``sentence####[(aspect, opinion, polarity), ...]`` files.

Each line holds pre-tokenized text, the separator ``####`` and a Python
list literal of triplets ``([aspect indices], [opinion indices], 'POS')``.
Index lists must be contiguous. AESC corpora use the same format with an
empty opinion list where no opinion is annotated.
"""

import ast
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel

from pair_absa.errors import ParseError
from pair_absa.tagging import AspectPolarity, Span, Triplet

logger = logging.getLogger(__name__)

SEPARATOR = "####"

POLARITY_ALIASES = {
    "POS": "POS",
    "NEU": "NEU",
    "NEG": "NEG",
    "positive": "POS",
    "neutral": "NEU",
    "negative": "NEG",
}


@dataclass
class Example:
    id: str
    tokens: List[str]
    triplets: List[Triplet] = field(default_factory=list)
    aspect_pairs: List[AspectPolarity] = field(default_factory=list)
    opinions: List[Span] = field(default_factory=list)
    contextual: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def gold(self, task: str) -> Union[Set[Triplet], Set[AspectPolarity]]:
        if task == "aste":
            return set(self.triplets)
        return set(self.aspect_pairs)

    def aspects(self) -> Set[Span]:
        found = {t.aspect for t in self.triplets} | {p.aspect for p in self.aspect_pairs}
        return found

    def all_opinions(self) -> Set[Span]:
        return {t.opinion for t in self.triplets} | set(self.opinions)


class DatasetStats(BaseModel):
    sentences: int
    tokens: int
    triplets: int
    aspect_pairs: int
    aspects: int
    opinions: int


def _span(indices: object, n: int, kind: str, path: Path, line_no: int, column: int) -> Span:
    if not isinstance(indices, (list, tuple)) or not all(isinstance(k, int) for k in indices):
        raise ParseError(f"{kind} indices must be a list of integers", path, line_no, column)
    if not indices:
        raise ParseError(f"empty {kind} index list", path, line_no, column)
    ordered = sorted(indices)
    if ordered != list(range(ordered[0], ordered[-1] + 1)):
        raise ParseError(f"{kind} indices {list(indices)} are not contiguous", path, line_no, column)
    if ordered[0] < 0 or ordered[-1] >= n:
        raise ParseError(
            f"{kind} indices {list(indices)} outside a sentence of {n} tokens", path, line_no, column
        )
    return Span(ordered[0], ordered[-1], "AT" if kind == "aspect" else "OT")


def parse_line(
    line: str, task: str = "aste", path: Union[str, Path] = "<input>", line_no: int = 1
) -> Example:
    path = Path(path)
    text = line.rstrip("\n").rstrip("\r")
    if SEPARATOR not in text:
        raise ParseError(f"missing '{SEPARATOR}' separator", path, line_no, len(text) + 1)
    sentence, annotation = text.split(SEPARATOR, 1)
    offset = len(sentence) + len(SEPARATOR)
    tokens = sentence.split()
    if not tokens:
        raise ParseError("empty sentence", path, line_no, 1)
    try:
        raw = ast.literal_eval(annotation.strip()) if annotation.strip() else []
    except (SyntaxError, ValueError) as e:
        column = offset + (getattr(e, "offset", None) or 1)
        raise ParseError(f"malformed triplet list ({e.__class__.__name__})", path, line_no, column) from None
    if not isinstance(raw, (list, tuple)):
        raise ParseError("annotation must be a list of triplets", path, line_no, offset + 1)

    example = Example(id=f"{path.stem}:{line_no}", tokens=tokens)
    seen_triplets: Set[Triplet] = set()
    seen_pairs: Set[AspectPolarity] = set()
    seen_opinions: Set[Span] = set()
    n = len(tokens)
    for k, item in enumerate(raw):
        column = offset + 1
        if not isinstance(item, (list, tuple)) or len(item) != 3:
            raise ParseError(f"item {k} is not an (aspect, opinion, polarity) triple", path, line_no, column)
        aspect_idx, opinion_idx, polarity_raw = item
        polarity = POLARITY_ALIASES.get(str(polarity_raw))
        if polarity is None:
            raise ParseError(f"unknown polarity '{polarity_raw}'", path, line_no, column)
        aspect = _span(aspect_idx, n, "aspect", path, line_no, column)
        pair = AspectPolarity(aspect, polarity)
        if pair not in seen_pairs:
            seen_pairs.add(pair)
            example.aspect_pairs.append(pair)
        if task == "aesc" and not opinion_idx:
            continue
        opinion = _span(opinion_idx, n, "opinion", path, line_no, column)
        if task == "aesc":
            if opinion not in seen_opinions:
                seen_opinions.add(opinion)
                example.opinions.append(opinion)
            continue
        try:
            triplet = Triplet(aspect, opinion, polarity)
        except ValueError as e:
            raise ParseError(str(e), path, line_no, column) from None
        if triplet in seen_triplets:
            logger.warning(f"{path}:{line_no}: duplicate triplet {triplet} dropped")
            continue
        seen_triplets.add(triplet)
        example.triplets.append(triplet)
    return example


def parse_dataset(path: Union[str, Path], task: str = "aste") -> List[Example]:
    """Parse a UTF-8 dataset file; blank lines are skipped."""
    if task not in ("aste", "aesc"):
        raise ValueError(f"unknown task '{task}'")
    path = Path(path)
    examples: List[Example] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            examples.append(parse_line(line, task, path, line_no))
    if not examples:
        logger.warning(f"{path} holds no examples")
    logger.info(f"Loaded {len(examples)} sentences from {path}")
    return examples


def format_line(tokens: Sequence[str], items: Iterable[Union[Triplet, AspectPolarity]]) -> str:
    parts: List[Tuple[List[int], List[int], str]] = []
    for item in sorted(items):
        if isinstance(item, Triplet):
            parts.append((item.aspect.indices(), item.opinion.indices(), item.polarity))
        else:
            parts.append((item.aspect.indices(), [], item.polarity))
    body = ", ".join(f"({a}, {o}, '{p}')" for a, o, p in parts)
    return f"{' '.join(tokens)}{SEPARATOR}[{body}]"


def write_dataset(path: Union[str, Path], rows: Iterable[Tuple[Sequence[str], Iterable[Union[Triplet, AspectPolarity]]]]) -> int:
    """Write ``(tokens, items)`` rows in the dataset format; returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for tokens, items in rows:
            f.write(format_line(tokens, items) + "\n")
            count += 1
    logger.info(f"Wrote {count} lines to {path}")
    return count


def dataset_stats(examples: Sequence[Example]) -> DatasetStats:
    return DatasetStats(
        sentences=len(examples),
        tokens=sum(len(ex) for ex in examples),
        triplets=sum(len(ex.triplets) for ex in examples),
        aspect_pairs=sum(len(ex.aspect_pairs) for ex in examples),
        aspects=sum(len(ex.aspects()) for ex in examples),
        opinions=sum(len(ex.all_opinions()) for ex in examples),
    )
