"""Named parameters, their gradients and the seeded generator tree."""

import logging
import zlib
from typing import Dict, Iterator, List, Optional, Set, Tuple

import numpy as np

from pair_absa.errors import ConfigError, DimensionError, NumericError
from pair_absa.numerics import Tensor

logger = logging.getLogger(__name__)


class Rng:
    """A splittable seeded generator.

    ``Rng(seed).child("dropout")`` always yields the same stream for the same
    seed and name, independent of how many other children were drawn.
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = path

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=self.path))


class ParamStore:
    """Parameters by unique name, with same-shaped gradient buffers."""

    def __init__(self, seed: int = 0, dtype: str = "float64"):
        self.rng_seed = int(seed)
        self.rng = Rng(seed).child("init")
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.frozen: Set[str] = set()

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> List[str]:
        return [name for name in self.params if name.startswith(prefix)]

    def trainable(self) -> List[str]:
        return [name for name in self.params if name not in self.frozen]

    def size(self, trainable_only: bool = True) -> int:
        names = self.trainable() if trainable_only else list(self.params)
        return int(np.sum([self.params[n].data.size for n in names]))

    def add(self, name: str, data: np.ndarray, frozen: bool = False) -> Tensor:
        if name in self.params:
            raise ConfigError(f"parameter '{name}' registered twice")
        tensor = Tensor(np.array(data, dtype=self.dtype), requires_grad=not frozen, name=name)
        self.params[name] = tensor
        self.grads[name] = np.zeros_like(tensor.data)
        if frozen:
            self.frozen.add(name)
        return tensor

    def create(
        self,
        name: str,
        shape: Tuple[int, ...],
        init: str = "xavier",
        limit: float = 0.1,
        frozen: bool = False,
    ) -> Tensor:
        """Register a parameter drawn from the generator child named after it."""
        gen = self.rng.child(name).generator()
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "uniform":
            data = gen.uniform(-limit, limit, size=shape)
        elif init == "xavier":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = gen.uniform(-bound, bound, size=shape)
        elif init == "normal":
            data = gen.normal(0.0, limit, size=shape)
        else:
            raise ConfigError(f"unknown initialiser '{init}' for '{name}'")
        return self.add(name, data, frozen=frozen)

    def zero_grad(self) -> None:
        for name in self.grads:
            self.grads[name].fill(0.0)

    def accumulate(self, node_grads: Dict[int, np.ndarray], weight: float = 1.0) -> None:
        """Add gradients returned by ``Graph.backward`` into the named buffers."""
        for name, tensor in self.params.items():
            if name in self.frozen or tensor.node_id is None:
                continue
            g = node_grads.get(tensor.node_id)
            if g is None:
                continue
            if g.shape != tensor.shape:
                raise DimensionError(f"gradient for '{name}' has the wrong shape", g.shape, tensor.shape)
            self.grads[name] += weight * g

    def check_finite(self) -> None:
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient", parameter=name)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [name for name in self.params if name not in state]
        unexpected = [name for name in state if name not in self.params]
        if strict and (missing or unexpected):
            raise DimensionError(
                f"parameter sets differ: missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        for name, tensor in self.params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise DimensionError(f"checkpoint parameter '{name}'", value.shape, tensor.shape)
            tensor.data[...] = value.astype(self.dtype)

    def get(self, name: str) -> Optional[Tensor]:
        return self.params.get(name)
