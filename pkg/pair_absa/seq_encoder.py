"""Stack of self-attention layers with residual connections and layer norm."""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

import pair_absa.numerics as nx
from pair_absa.config import EncoderConfig
from pair_absa.errors import DimensionError
from pair_absa.numerics import Tensor
from pair_absa.params import ParamStore

logger = logging.getLogger(__name__)

# interleave(layer_index, S_before_layer, S_after_layer) -> S fed onward
Interleave = Callable[[int, Tensor, Tensor], Tensor]


@dataclass
class LayerState:
    S: Tensor
    mask: np.ndarray
    attention: Optional[np.ndarray] = None


@dataclass
class EncoderLayer:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


class SequenceEncoder:
    def __init__(self, store: ParamStore, config: EncoderConfig, prefix: str = "seq"):
        self.config = config
        d, f = config.d, config.ffn_inner_dim
        self.head_dim = d // config.n_heads
        self.positions = (
            store.create(f"{prefix}.positions", (config.max_positions, d), init="normal", limit=0.02)
            if config.use_positions
            else None
        )
        self.layers: List[EncoderLayer] = []
        for l in range(config.n_layers):
            p = f"{prefix}.layer{l}"
            self.layers.append(
                EncoderLayer(
                    Wq=store.create(f"{p}.Wq", (d, d)),
                    Wk=store.create(f"{p}.Wk", (d, d)),
                    Wv=store.create(f"{p}.Wv", (d, d)),
                    Wo=store.create(f"{p}.Wo", (d, d)),
                    ln1_gain=store.create(f"{p}.ln1.gain", (d,), init="ones"),
                    ln1_bias=store.create(f"{p}.ln1.bias", (d,), init="zeros"),
                    W1=store.create(f"{p}.W1", (d, f)),
                    b1=store.create(f"{p}.b1", (f,), init="zeros"),
                    W2=store.create(f"{p}.W2", (f, d)),
                    b2=store.create(f"{p}.b2", (d,), init="zeros"),
                    ln2_gain=store.create(f"{p}.ln2.gain", (d,), init="ones"),
                    ln2_bias=store.create(f"{p}.ln2.bias", (d,), init="zeros"),
                )
            )

    def add_positions(self, x: Tensor) -> Tensor:
        if self.positions is None:
            return x
        n = x.shape[0]
        if n > self.config.max_positions:
            raise DimensionError(
                f"sentence of {n} tokens exceeds max_positions={self.config.max_positions}"
            )
        return nx.add(x, nx.narrow(self.positions, 0, 0, n))

    def multi_head_attention(
        self,
        layer: EncoderLayer,
        x: Tensor,
        mask: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> LayerState:
        """Masked scaled dot-product attention, output projection, then LayerNorm(r + x)."""
        n, d = x.shape
        m, dk = self.config.n_heads, self.head_dim
        if d != self.config.d:
            raise DimensionError("attention input has the wrong width", x.shape, (n, self.config.d))

        def heads(W: Tensor) -> Tensor:
            return nx.transpose(nx.reshape(nx.matmul(x, W), (n, m, dk)), (1, 0, 2))

        Q, K, V = heads(layer.Wq), heads(layer.Wk), heads(layer.Wv)
        scores = nx.scale(nx.matmul(Q, nx.transpose(K, (0, 2, 1))), dk**-0.5)
        key_mask = np.broadcast_to(np.asarray(mask, dtype=bool)[None, None, :], (m, n, n))
        weights = nx.softmax(scores, axis=-1, mask=key_mask)
        context = nx.reshape(nx.transpose(nx.matmul(weights, V), (1, 0, 2)), (n, d))
        r = nx.dropout(nx.matmul(context, layer.Wo), self.config.dropout_rate, training, rng)
        a = nx.layer_norm(nx.add(r, x), layer.ln1_gain, layer.ln1_bias, self.config.layer_norm_eps)
        return LayerState(S=a, mask=mask, attention=weights.data)

    def feed_forward(
        self,
        layer: EncoderLayer,
        a: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """S = LayerNorm(e + a) with e = act(a W1 + b1) W2 + b2."""
        hidden = nx.add(nx.matmul(a, layer.W1), layer.b1)
        if self.config.ffn_activation == "relu":
            hidden = nx.relu(hidden)
        e = nx.add(nx.matmul(hidden, layer.W2), layer.b2)
        e = nx.dropout(e, self.config.dropout_rate, training, rng)
        return nx.layer_norm(nx.add(e, a), layer.ln2_gain, layer.ln2_bias, self.config.layer_norm_eps)

    def layer(
        self,
        index: int,
        S: Tensor,
        mask: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> LayerState:
        layer = self.layers[index]
        attended = self.multi_head_attention(layer, S, mask, training, rng)
        out = self.feed_forward(layer, attended.S, training, rng)
        return LayerState(S=out, mask=mask, attention=attended.attention)

    def encode_sequence(
        self,
        x: Tensor,
        mask: Optional[np.ndarray] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        interleave: Optional[Interleave] = None,
    ) -> List[LayerState]:
        """Run every layer; the state of each layer is kept.

        ``x`` is the projected token representation; positions are added
        here. ``interleave`` lets a caller rewrite each layer's output
        before it feeds the next layer.
        """
        n = x.shape[0]
        mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise DimensionError("mask length differs from the sequence", mask.shape, (n,))
        S = self.add_positions(x)
        states: List[LayerState] = []
        for l in range(self.config.n_layers):
            state = self.layer(l, S, mask, training, rng)
            if interleave is not None:
                state = LayerState(S=interleave(l, S, state.S), mask=mask, attention=state.attention)
            if not mask.all():
                # padded rows carry zeros into the next layer
                state = LayerState(S=nx.masked_fill(state.S, ~mask[:, None]), mask=mask, attention=state.attention)
            states.append(state)
            S = state.S
        return states
