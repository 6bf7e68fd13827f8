"""Exact-match precision, recall and F1, micro-averaged over a corpus."""

import logging
from typing import Dict, Hashable, Iterable, List, Sequence, Set, Tuple

import pandas as pd
from pydantic import BaseModel, Field

from pair_absa.tagging import AspectPolarity, Span, Triplet

logger = logging.getLogger(__name__)

MODES = ("AE", "OE", "ASTE", "AESC")


class MetricReport(BaseModel):
    mode: str
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    tp: int
    n_pred: int
    n_gold: int


class EvalReport(BaseModel):
    task: str
    metrics: Dict[str, MetricReport]

    @property
    def main(self) -> MetricReport:
        return self.metrics[self.task.upper()]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([m.model_dump() for m in self.metrics.values()])

    def format_table(self) -> str:
        lines = [f"{'mode':<6}{'P':>9}{'R':>9}{'F1':>9}{'tp':>7}{'pred':>7}{'gold':>7}"]
        for m in self.metrics.values():
            lines.append(
                f"{m.mode:<6}{m.precision:>9.4f}{m.recall:>9.4f}{m.f1:>9.4f}"
                f"{m.tp:>7d}{m.n_pred:>7d}{m.n_gold:>7d}"
            )
        return "\n".join(lines)


def prf(tp: int, n_pred: int, n_gold: int) -> Tuple[float, float, float]:
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def score(pred: Iterable[Hashable], gold: Iterable[Hashable], mode: str = "ASTE") -> MetricReport:
    """Score two sets of already-keyed items by exact match.

    Items from different sentences must carry the sentence key themselves
    (see ``keyed_items``), otherwise identical spans would collapse.
    """
    pred_set = set(pred)
    gold_set = set(gold)
    tp = len(pred_set & gold_set)
    precision, recall, f1 = prf(tp, len(pred_set), len(gold_set))
    return MetricReport(
        mode=mode,
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp,
        n_pred=len(pred_set),
        n_gold=len(gold_set),
    )


def _project(item: Hashable, mode: str) -> List[Hashable]:
    if mode == "AE":
        if isinstance(item, (Triplet, AspectPolarity)):
            return [(item.aspect.start, item.aspect.end)]
    if mode == "OE" and isinstance(item, Triplet):
        return [(item.opinion.start, item.opinion.end)]
    if mode == "ASTE" and isinstance(item, Triplet):
        return [item]
    if mode == "AESC":
        if isinstance(item, Triplet):
            return [AspectPolarity(item.aspect, item.polarity)]
        if isinstance(item, AspectPolarity):
            return [item]
    if isinstance(item, Span):
        if (mode == "AE" and item.kind == "AT") or (mode == "OE" and item.kind == "OT"):
            return [(item.start, item.end)]
    return []


def keyed_items(per_sentence: Sequence[Iterable[Hashable]], mode: str) -> Set[Tuple[int, Hashable]]:
    """Flatten per-sentence collections into ``(sentence index, item)`` pairs for ``mode``."""
    keyed: Set[Tuple[int, Hashable]] = set()
    for k, items in enumerate(per_sentence):
        for item in items:
            for projected in _project(item, mode):
                keyed.add((k, projected))
    return keyed


def evaluate_sets(
    pred: Sequence[Iterable[Hashable]],
    gold: Sequence[Iterable[Hashable]],
    task: str,
    modes: Sequence[str] = (),
) -> EvalReport:
    """AE, OE and the task metric over per-sentence prediction/gold collections.

    Each collection may mix triplets or aspect/polarity pairs with bare
    spans; bare spans only count for AE/OE.
    """
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold sentences")
    wanted = list(modes) if modes else ["AE", "OE", task.upper()]
    metrics: Dict[str, MetricReport] = {}
    for mode in wanted:
        metrics[mode] = score(keyed_items(pred, mode), keyed_items(gold, mode), mode)
    report = EvalReport(task=task, metrics=metrics)
    logger.info(
        f"{task.upper()} P={report.main.precision:.4f} R={report.main.recall:.4f} F1={report.main.f1:.4f}"
    )
    return report
