"""Timing of sequential against wavefront 2-D GRU scans."""

import logging
import time
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from pair_absa.errors import ConfigError, NumericError
from pair_absa.numerics import Tensor, constant
from pair_absa.pair_encoder import MODE_DIRECTIONS, GRUCellParams, mdgru_multi
from pair_absa.params import ParamStore, Rng

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["n", "mode", "workers", "wall_time_seq", "wall_time_wave", "speedup", "max_deviation"]


def _timed(cells: Sequence[GRUCellParams], S_prime: Tensor, mode: str, workers: int, repeats: int) -> tuple:
    best: Optional[float] = None
    out = None
    for _ in range(repeats):
        start = time.perf_counter()
        out = mdgru_multi(cells, S_prime, None, mode, workers).data
        elapsed = time.perf_counter() - start
        best = elapsed if best is None else min(best, elapsed)
    return out, best


def run_bench(
    n: int,
    workers: int = 4,
    modes: Sequence[str] = ("quad",),
    hidden: int = 8,
    d_pair: int = 16,
    seed: int = 0,
    repeats: int = 1,
    tol: float = 1e-12,
) -> pd.DataFrame:
    """One row per direction mode.

    The sequential baseline walks cells row-major (one worker). Outputs are
    compared before any timing is reported; a deviation above ``tol``
    raises NumericError.
    """
    if n < 1:
        raise ConfigError(f"grid size must be at least 1, got {n}")
    if workers < 1:
        raise ConfigError(f"workers must be at least 1, got {workers}")
    rows: List[Dict[str, object]] = []
    S_prime = constant(Rng(seed).child("bench").generator().normal(size=(n, n, d_pair)))
    for mode in modes:
        if mode not in MODE_DIRECTIONS:
            raise ConfigError(f"unknown direction mode '{mode}'")
        store = ParamStore(seed=seed)
        cells = [
            GRUCellParams.create(store, f"bench.{direction}", d_pair, hidden)
            for direction in MODE_DIRECTIONS[mode]
        ]
        seq_out, seq_time = _timed(cells, S_prime, mode, 1, repeats)
        if workers == 1:
            wave_out, wave_time = seq_out, seq_time
        else:
            wave_out, wave_time = _timed(cells, S_prime, mode, workers, repeats)
        deviation = float(np.max(np.abs(wave_out - seq_out)))
        if deviation > tol:
            raise NumericError(
                f"wavefront output deviates from the sequential scan by {deviation:.3e} "
                f"(n={n}, mode={mode}, workers={workers})"
            )
        speedup = 1.0 if workers == 1 else seq_time / max(wave_time, 1e-12)
        logger.info(f"n={n} {mode} workers={workers}: {seq_time:.4f}s vs {wave_time:.4f}s")
        rows.append(
            {
                "n": n,
                "mode": mode,
                "workers": workers,
                "wall_time_seq": seq_time,
                "wall_time_wave": wave_time,
                "speedup": speedup,
                "max_deviation": deviation,
            }
        )
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)
