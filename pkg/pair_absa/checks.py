"""Self-checks run by ``main.py check``: grid round trip, gradient check, 2-D GRU equivalence."""

import logging
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from pair_absa.config import ModelConfig
from pair_absa.data import DatasetStats, Example, dataset_stats, parse_line
from pair_absa.errors import EncodingConflictError
from pair_absa.gradcheck import GradCheckReport, grad_check
from pair_absa.model import DualEncoderModel
from pair_absa.numerics import Tensor, constant
from pair_absa.pair_encoder import DIRECTION_FLIPS, GRUCellParams, mdgru_forward, mdgru_reference
from pair_absa.params import ParamStore, Rng
from pair_absa.tagging import TagGrid, decode_grid, decode_spans, encode_grid
from pair_absa.training import build_model

logger = logging.getLogger(__name__)

GRADCHECK_SAMPLES = 5

MICRO_SENTENCE = "The battery life is very good####[([1, 2], [5], 'POS')]"


class RoundTripReport(BaseModel):
    task: str
    examples: int
    checked: int
    conflicts: int
    mismatches: int
    conflict_ids: List[str] = []
    mismatch_ids: List[str] = []
    stats: DatasetStats

    @property
    def passed(self) -> bool:
        return self.mismatches == 0


class EquivalenceReport(BaseModel):
    cases: int
    max_deviation: float
    worst_case: Optional[str] = None
    tol: float
    passed: bool


def run_grid_roundtrip(examples: Sequence[Example], task: str = "aste") -> RoundTripReport:
    """Encode every gold annotation into a grid and decode it back."""
    conflicts: List[str] = []
    mismatches: List[str] = []
    checked = 0
    for ex in examples:
        gold = ex.gold(task)
        try:
            grid = encode_grid(len(ex), gold, task, ex.opinions)
        except EncodingConflictError as e:
            logger.warning(f"{ex.id}: {e}")
            conflicts.append(ex.id)
            continue
        checked += 1
        aspects, opinions = decode_spans(grid.diag)
        if (
            decode_grid(grid, task) != gold
            or set(aspects) != ex.aspects()
            or set(opinions) != ex.all_opinions()
        ):
            mismatches.append(ex.id)
    report = RoundTripReport(
        task=task,
        examples=len(examples),
        checked=checked,
        conflicts=len(conflicts),
        mismatches=len(mismatches),
        conflict_ids=conflicts,
        mismatch_ids=mismatches,
        stats=dataset_stats(examples),
    )
    logger.info(
        f"grid round trip: {checked} checked, {len(conflicts)} conflicts, {len(mismatches)} mismatches"
    )
    return report


def micro_config(**overrides: object) -> ModelConfig:
    """Small quad-direction model for gradient checks (6 tokens, d=8, 2 heads, 2 layers, h=4)."""
    values = dict(
        hidden_dim=8,
        n_heads=2,
        n_layers=2,
        ffn_inner_dim=4,
        word_dim=4,
        char_embed_dim=3,
        char_out_dim=4,
        pair_hidden_dim=4,
        pair_dim=8,
        max_positions=8,
        directions="quad",
        dropout=0.0,
        dtype="float64",
    )
    values.update(overrides)
    return ModelConfig(**values)  # type: ignore[arg-type]


def micro_example(task: str = "aste") -> Example:
    return parse_line(MICRO_SENTENCE, task, "micro", 1)


def micro_model(config: Optional[ModelConfig] = None) -> Tuple[DualEncoderModel, Example, TagGrid]:
    config = config or micro_config()
    example = micro_example(config.task)
    model = build_model(config, [example])
    grid = encode_grid(len(example), example.gold(config.task), config.task, example.opinions)
    return model, example, grid


def run_gradcheck(
    config: Optional[ModelConfig] = None,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_per_param: Optional[int] = GRADCHECK_SAMPLES,
) -> GradCheckReport:
    """Finite-difference check of the full joint loss of the micro model.

    Every trainable tensor is checked; ``max_per_param`` caps the elements
    drawn from each one, and ``None`` checks every element.
    """
    model, example, grid = micro_model(config)

    def loss() -> Tensor:
        out = model.forward(example.tokens, training=False)
        return model.loss(out, grid).total

    return grad_check(loss, model.store, h=h, tol=tol, max_per_param=max_per_param, seed=model.config.seed)


def _random_cell(seed: int, d_pair: int, hidden: int) -> GRUCellParams:
    store = ParamStore(seed=seed)
    cell = GRUCellParams.create(store, "cell", d_pair, hidden)
    gen = Rng(seed).child("biases").generator()
    for bias in (cell.b, cell.bg):
        bias.data[...] = gen.uniform(-0.5, 0.5, size=bias.shape)
    return cell


def run_mdgru_equivalence(
    sizes: Iterable[int] = range(1, 7),
    seeds: int = 100,
    hidden: int = 4,
    d_pair: int = 5,
    worker_counts: Sequence[int] = (0, 1, 4),
    tol: float = 1e-12,
) -> EquivalenceReport:
    """Scheduled scans against the cell-by-cell reference loop."""
    worst = 0.0
    worst_case: Optional[str] = None
    cases = 0
    directions = list(DIRECTION_FLIPS)
    for n in sizes:
        for seed in range(seeds):
            cell = _random_cell(seed, d_pair, hidden)
            gen = Rng(seed).child(f"grid/{n}").generator()
            S_prime = gen.normal(size=(n, n, d_pair))
            P_prev = gen.normal(size=(n, n, hidden)) if seed % 2 else None
            for direction in directions:
                expected = mdgru_reference(cell, S_prime, P_prev, direction)
                for workers in worker_counts:
                    got = mdgru_forward(
                        cell,
                        constant(S_prime),
                        None if P_prev is None else constant(P_prev),
                        direction,
                        workers,
                    ).data
                    deviation = float(np.max(np.abs(got - expected)))
                    cases += 1
                    if deviation > worst:
                        worst = deviation
                        worst_case = f"n={n} seed={seed} direction={direction} workers={workers}"
    logger.info(f"2-D GRU equivalence: {cases} cases, max deviation {worst:.3e}")
    return EquivalenceReport(cases=cases, max_deviation=worst, worst_case=worst_case, tol=tol, passed=worst <= tol)


def run_worker_invariance(n: int = 64, workers: Sequence[int] = (1, 4), hidden: int = 4, d_pair: int = 5, seed: int = 0) -> float:
    """Largest difference between scans run with different worker counts."""
    cell = _random_cell(seed, d_pair, hidden)
    S_prime = constant(Rng(seed).child("invariance").generator().normal(size=(n, n, d_pair)))
    outputs = [mdgru_forward(cell, S_prime, None, "se", w).data for w in workers]
    return max(float(np.max(np.abs(out - outputs[0]))) for out in outputs)

