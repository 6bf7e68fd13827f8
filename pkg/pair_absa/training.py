"""Optimisation: Adam with global-norm clipping and lr decay, the training loop, evaluation."""

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from pair_absa.config import ModelConfig
from pair_absa.data import Example
from pair_absa.embedding import Vocab, attach_contextual, load_contextual, load_word_embeddings
from pair_absa.errors import EncodingConflictError, NumericError
from pair_absa.metrics import EvalReport, evaluate_sets
from pair_absa.model import DualEncoderModel, Prediction
from pair_absa.numerics import Graph, is_finite
from pair_absa.params import ParamStore, Rng
from pair_absa.tagging import TagGrid, encode_grid

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "step",
    "epoch",
    "lr",
    "loss",
    "loss_term",
    "loss_pola",
    "grad_norm",
    "dev_precision",
    "dev_recall",
    "dev_f1",
]


@dataclass
class TrainState:
    step: int = 0
    lr: float = 0.0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    best_dev: float = -1.0
    rng_seed: int = 0

    @classmethod
    def init(cls, store: ParamStore, config: ModelConfig) -> "TrainState":
        names = store.trainable()
        return cls(
            step=0,
            lr=config.learning_rate,
            m={n: np.zeros_like(store[n].data) for n in names},
            v={n: np.zeros_like(store[n].data) for n in names},
            rng_seed=config.seed,
        )


@dataclass
class TrainResult:
    model: DualEncoderModel
    log: pd.DataFrame
    state: TrainState
    best_epoch: Optional[int] = None
    dev_report: Optional[EvalReport] = None
    skipped: int = 0


def learning_rate(step: int, config: ModelConfig) -> float:
    """``lr0 / (1 + rate * step / steps)``, or ``lr0 * (1 - rate) ** (step / steps)`` when exponential."""
    ratio = step / config.decay_steps
    if config.lr_schedule == "exponential":
        return config.learning_rate * (1.0 - config.decay_rate) ** ratio
    return config.learning_rate / (1.0 + config.decay_rate * ratio)


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def optimizer_step(store: ParamStore, state: TrainState, config: ModelConfig) -> float:
    """Clip, then one Adam update of every trainable parameter; returns the pre-clip norm."""
    names = [n for n in store.trainable() if n in state.m]
    grads = {n: store.grads[n] for n in names}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at step {state.step}", parameter=name)
    norm = clip_global_norm(grads, config.clip_norm)
    lr = learning_rate(state.step, config)
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    t = state.step + 1
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name in names:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        store[name].data -= update.astype(store[name].dtype)
    state.step = t
    state.lr = lr
    return norm


def encode_examples(examples: Sequence[Example], task: str) -> Tuple[List[Tuple[Example, TagGrid]], int]:
    """Gold grids for every example; conflicting examples are skipped and counted."""
    encoded: List[Tuple[Example, TagGrid]] = []
    skipped = 0
    for ex in examples:
        try:
            grid = encode_grid(len(ex), ex.gold(task), task, ex.opinions)
        except EncodingConflictError as e:
            logger.warning(f"skipping {ex.id}: {e}")
            skipped += 1
            continue
        encoded.append((ex, grid))
    if skipped:
        logger.warning(f"{skipped} of {len(examples)} examples skipped for encoding conflicts")
    return encoded, skipped


def build_model(
    config: ModelConfig,
    examples: Sequence[Example],
    embeddings: Optional[Union[str, Path]] = None,
    contextual: Optional[Union[str, Path]] = None,
    extra: Sequence[Example] = (),
) -> DualEncoderModel:
    """Vocabulary from ``examples`` (+ ``extra``), word table, contextual vectors, fresh model."""
    everything = list(itertools.chain(examples, extra))
    vocab = Vocab.build(ex.tokens for ex in everything)
    table = load_word_embeddings(
        embeddings, config.word_dim, vocab, Rng(config.seed).child("words"), config.oov_init_range
    )
    plm_dim = attach_contextual(everything, load_contextual(contextual))
    return DualEncoderModel(config, vocab, table, plm_dim)


def predict_all(model: DualEncoderModel, examples: Sequence[Example]) -> List[Prediction]:
    return [model.predict(ex) for ex in examples]


def _collections(
    model: DualEncoderModel, examples: Sequence[Example], predictions: Sequence[Prediction]
) -> Tuple[List[List[Hashable]], List[List[Hashable]]]:
    task = model.config.task
    pred: List[List[Hashable]] = []
    gold: List[List[Hashable]] = []
    for ex, p in zip(examples, predictions):
        pred.append([*p.items(task), *p.aspects, *p.opinions])
        gold.append([*ex.gold(task), *ex.aspects(), *ex.all_opinions()])
    return pred, gold


def evaluate(
    model: DualEncoderModel,
    examples: Sequence[Example],
    predictions: Optional[Sequence[Prediction]] = None,
) -> EvalReport:
    """AE, OE and task scores of the model's predictions against the gold annotation.

    Args:
        model: Model to run in inference mode.
        examples: Gold-annotated examples.
        predictions: Precomputed predictions aligned with ``examples``; the
            model is run when omitted.

    Returns:
        EvalReport with micro P/R/F1 rows for AE, OE and the task (ASTE or AESC).
    """
    if predictions is None:
        predictions = predict_all(model, examples)
    pred, gold = _collections(model, examples, predictions)
    return evaluate_sets(pred, gold, model.config.task)


def train(
    model: DualEncoderModel,
    train_set: Sequence[Example],
    dev_set: Sequence[Example] = (),
    on_epoch: Optional[Callable[[int, Dict[str, float]], Optional[bool]]] = None,
) -> TrainResult:
    """Mini-batch training; the parameters with the best dev F1 are restored at the end.

    The batch loss is the mean over examples of the summed per-example
    loss. Shuffling and dropout draw from named children of the config
    seed, so equal seeds give equal runs.

    Args:
        model: Freshly built model; its config supplies every hyperparameter.
        train_set: Examples to fit. Examples whose gold grid conflicts are skipped.
        dev_set: Evaluated after every epoch when non-empty.
        on_epoch: Called as ``on_epoch(epoch, summary)`` after each epoch with
            the last loss, the lr and the dev scores. Returning True stops
            training after that epoch.

    Returns:
        TrainResult with the per-step log, the optimiser state, the best dev
        epoch and report, and the number of skipped examples.
    """
    config = model.config
    store = model.store
    state = TrainState.init(store, config)
    rows: List[Dict[str, float]] = []
    best_state: Optional[Dict[str, np.ndarray]] = None
    best_epoch: Optional[int] = None
    dev_report: Optional[EvalReport] = None

    encoded, skipped = encode_examples(train_set, config.task)
    max_steps = config.max_steps
    if max_steps == 0 or config.epochs == 0 or not encoded:
        logger.info("Nothing to train, returning the initialised model")
        return TrainResult(model, pd.DataFrame(columns=LOG_COLUMNS), state, skipped=skipped)

    root = Rng(config.seed)
    done = False
    for epoch in range(1, config.epochs + 1):
        order = root.child(f"shuffle/{epoch}").generator().permutation(len(encoded))
        for start in range(0, len(order), config.batch_size):
            batch = [encoded[k] for k in order[start : start + config.batch_size]]
            store.zero_grad()
            term_total = pola_total = 0.0
            for k, (ex, grid) in enumerate(batch):
                rng = root.child(f"dropout/{state.step}/{k}").generator()
                with Graph() as graph:
                    out = model.forward(ex.tokens, ex.contextual, training=True, rng=rng, example_id=ex.id)
                    parts = model.loss(out, grid)
                if not is_finite(parts.total):
                    raise NumericError(f"non-finite loss on {ex.id} at step {state.step}")
                store.accumulate(graph.backward(parts.total), weight=1.0 / len(batch))
                term_total += parts.term.item()
                pola_total += parts.pola.item()
            norm = optimizer_step(store, state, config)
            term_mean = term_total / len(batch)
            pola_mean = pola_total / len(batch)
            rows.append(
                {
                    "step": state.step,
                    "epoch": epoch,
                    "lr": state.lr,
                    "loss": term_mean + pola_mean,
                    "loss_term": term_mean,
                    "loss_pola": pola_mean,
                    "grad_norm": norm,
                    "dev_precision": np.nan,
                    "dev_recall": np.nan,
                    "dev_f1": np.nan,
                }
            )
            if max_steps is not None and state.step >= max_steps:
                done = True
                break

        summary = {"loss": rows[-1]["loss"], "lr": state.lr}
        if dev_set:
            report = evaluate(model, dev_set)
            main = report.main
            rows[-1].update(dev_precision=main.precision, dev_recall=main.recall, dev_f1=main.f1)
            summary.update(dev_precision=main.precision, dev_recall=main.recall, dev_f1=main.f1)
            if main.f1 > state.best_dev:
                state.best_dev = main.f1
                best_state = store.state_dict()
                best_epoch = epoch
                dev_report = report
            logger.info(f"epoch {epoch}: loss {summary['loss']:.4f}, dev F1 {main.f1:.4f}")
        else:
            logger.info(f"epoch {epoch}: loss {summary['loss']:.4f}")
        if on_epoch is not None and on_epoch(epoch, summary):
            logger.info(f"Stopping after epoch {epoch} on request")
            break
        if done:
            break

    if best_state is not None:
        store.load_state_dict(best_state)
        logger.info(f"Restored parameters from epoch {best_epoch} (dev F1 {state.best_dev:.4f})")
    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    return TrainResult(model, log, state, best_epoch, dev_report, skipped)
