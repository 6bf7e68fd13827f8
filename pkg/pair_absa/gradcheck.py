"""Central finite-difference check of taped gradients."""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from pair_absa.errors import NumericError
from pair_absa.numerics import Graph, Tensor
from pair_absa.params import ParamStore, Rng

logger = logging.getLogger(__name__)


class GradCheckReport(BaseModel):
    max_rel_error: float
    worst_parameter: Optional[str] = None
    worst_index: Optional[List[int]] = None
    checked: int
    skipped_kinks: int
    tol: float
    passed: bool
    per_parameter: Dict[str, float] = {}


def _evaluate(loss_fn: Callable[[], Tensor], record: bool) -> Tuple[Graph, Tensor, float]:
    with Graph(record=record) as graph:
        loss = loss_fn()
    if graph.stochastic:
        raise NumericError("gradient check needs a deterministic loss; dropout is in training mode")
    if loss.data.size != 1:
        raise NumericError(f"gradient check needs a scalar loss, got shape {loss.shape}")
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("loss is not finite at the evaluation point")
    return graph, loss, value


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    max_per_param: Optional[int] = None,
    abs_floor: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, abs_floor)``.
    Elements whose perturbed evaluations take a different ReLU or max branch
    than the unperturbed one are counted in ``skipped_kinks``, not checked.
    """
    if h <= 0:
        raise NumericError(f"finite-difference step must be positive, got {h}")
    graph, loss, _ = _evaluate(loss_fn, record=True)
    node_grads = graph.backward(loss)
    base_signature = graph.branch_signature()

    sampler = Rng(seed).child("gradcheck").generator()
    checked = 0
    kinks = 0
    worst = 0.0
    worst_name: Optional[str] = None
    worst_index: Optional[List[int]] = None
    per_parameter: Dict[str, float] = {}

    for name in names if names is not None else params.trainable():
        tensor = params[name]
        analytic = node_grads.get(tensor.node_id) if tensor.node_id is not None else None
        if analytic is None:
            analytic = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            positions = np.sort(sampler.choice(flat.size, size=max_per_param, replace=False))
        param_worst = 0.0
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + h
            plus_graph, _, f_plus = _evaluate(loss_fn, record=False)
            flat[pos] = original - h
            minus_graph, _, f_minus = _evaluate(loss_fn, record=False)
            flat[pos] = original
            if (
                plus_graph.branch_signature() != base_signature
                or minus_graph.branch_signature() != base_signature
            ):
                kinks += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[pos])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            checked += 1
            param_worst = max(param_worst, rel)
            if rel > worst:
                worst = rel
                worst_name = name
                worst_index = [int(k) for k in np.unravel_index(pos, tensor.shape)]
        per_parameter[name] = param_worst

    if kinks:
        logger.warning(f"gradient check skipped {kinks} elements sitting on a ReLU/max kink")
    logger.info(f"gradient check: {checked} elements, max relative error {worst:.3e}")
    return GradCheckReport(
        max_rel_error=worst,
        worst_parameter=worst_name,
        worst_index=worst_index,
        checked=checked,
        skipped_kinks=kinks,
        tol=tol,
        passed=worst <= tol,
        per_parameter=per_parameter,
    )
