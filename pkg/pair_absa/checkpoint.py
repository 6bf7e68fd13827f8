"""Checkpoint files: a numpy ``.npz`` of named parameters plus a JSON header."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from pair_absa.config import ModelConfig
from pair_absa.embedding import Vocab
from pair_absa.errors import CheckpointError, DimensionError
from pair_absa.model import DualEncoderModel

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_KEY = "__meta__"


def save_checkpoint(
    path: Union[str, Path], model: DualEncoderModel, extra: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.store.state_dict()
    meta = {
        "format_version": FORMAT_VERSION,
        "config": model.config.model_dump(),
        "vocab": model.vocab.to_dict(),
        "plm_dim": model.plm_dim,
        "parameters": {name: list(array.shape) for name, array in state.items()},
        "extra": extra or {},
    }
    payload = {name: array for name, array in state.items()}
    payload[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **payload)
    logger.info(f"Saved checkpoint with {len(state)} tensors to {path}")
    return path


def read_meta(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            raw = archive[META_KEY].tobytes() if META_KEY in archive.files else None
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{path} is not a checkpoint: {e}") from e
    if raw is None:
        raise CheckpointError(f"{path} has no {META_KEY} header")
    meta = json.loads(raw.decode("utf-8"))
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    return meta


def load_checkpoint(path: Union[str, Path], **overrides: Any) -> DualEncoderModel:
    """Rebuild the model from the header and load every parameter.

    ``overrides`` may change execution-only settings such as
    ``mdgru_workers``; anything that alters shapes raises DimensionError.
    """
    path = Path(path)
    meta = read_meta(path)
    config_values = dict(meta["config"])
    config_values.update({k: v for k, v in overrides.items() if v is not None})
    config = ModelConfig(**config_values)
    vocab = Vocab.from_dict(meta["vocab"])
    word_shape = meta["parameters"].get("embed.words")
    table = np.zeros(word_shape) if word_shape else None
    model = DualEncoderModel(config, vocab, table, int(meta.get("plm_dim", 0)))
    expected = {name: tuple(shape) for name, shape in meta["parameters"].items()}
    actual = {name: model.store[name].shape for name in model.store}
    if expected != actual:
        diff = sorted(
            f"{name}: checkpoint {expected.get(name)} vs model {actual.get(name)}"
            for name in set(expected) | set(actual)
            if expected.get(name) != actual.get(name)
        )
        raise DimensionError("checkpoint does not match the configured model: " + "; ".join(diff[:10]))
    with np.load(path, allow_pickle=False) as archive:
        state = {name: archive[name] for name in archive.files if name != META_KEY}
    model.store.load_state_dict(state)
    logger.info(f"Loaded checkpoint {path} ({len(state)} tensors)")
    return model
