"""
Token representation: ``x_i = [x_char; x_word; x_plm]`` followed by a
learned projection to the model dimension.

* ``x_char``: characters embedded and read by a bidirectional LSTM, final
  forward and backward states concatenated;
* ``x_word``: frozen word vectors loaded from a GloVe-style text file;
* ``x_plm``: optional precomputed contextual vectors read from disk.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import pair_absa.numerics as nx
from pair_absa.config import ModelConfig
from pair_absa.errors import AlignmentError, ConfigError, ParseError
from pair_absa.numerics import Tensor
from pair_absa.params import ParamStore, Rng

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1


@dataclass
class Vocab:
    """Word and character indices; 0 is PAD and 1 is UNK in both maps."""

    words: Dict[str, int] = field(default_factory=lambda: {PAD: PAD_ID, UNK: UNK_ID})
    chars: Dict[str, int] = field(default_factory=lambda: {PAD: PAD_ID, UNK: UNK_ID})

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocab":
        word_counts: Counter = Counter()
        char_set = set()
        for tokens in sentences:
            for token in tokens:
                word_counts[token.lower()] += 1
                char_set.update(token)
        vocab = cls()
        for word in sorted(w for w, c in word_counts.items() if c >= min_count):
            vocab.words.setdefault(word, len(vocab.words))
        for ch in sorted(char_set):
            vocab.chars.setdefault(ch, len(vocab.chars))
        logger.info(f"Vocabulary: {len(vocab.words)} words, {len(vocab.chars)} characters")
        return vocab

    def word_id(self, token: str) -> int:
        return self.words.get(token.lower(), UNK_ID)

    def char_ids(self, token: str) -> List[int]:
        return [self.chars.get(ch, UNK_ID) for ch in token]

    def to_dict(self) -> Dict[str, List[str]]:
        return {
            "words": sorted(self.words, key=self.words.__getitem__),
            "chars": sorted(self.chars, key=self.chars.__getitem__),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, List[str]]) -> "Vocab":
        vocab = cls(
            words={w: k for k, w in enumerate(payload["words"])},
            chars={c: k for k, c in enumerate(payload["chars"])},
        )
        if vocab.words.get(PAD) != PAD_ID or vocab.words.get(UNK) != UNK_ID:
            raise ConfigError("stored vocabulary lost its PAD/UNK entries")
        return vocab


def read_embedding_file(path: Union[str, Path], dim: int) -> Dict[str, np.ndarray]:
    """Parse ``token v1 ... v_dim`` lines; the first occurrence of a token wins."""
    path = Path(path)
    vectors: Dict[str, np.ndarray] = {}
    duplicates = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.rstrip().split(" ")
            if not parts or not parts[0]:
                continue
            token, values = parts[0], parts[1:]
            if line_no == 1 and len(values) == 1 and token.isdigit():
                # word2vec-style "count dim" header
                if int(values[0]) != dim:
                    raise ConfigError(f"{path} holds {values[0]}-d vectors, config asks for {dim}")
                continue
            if not vectors and not duplicates and len(values) != dim:
                raise ConfigError(f"{path} holds {len(values)}-d vectors, config asks for {dim}")
            if len(values) != dim:
                raise ParseError(
                    f"expected {dim} floats after '{token}', found {len(values)}",
                    path,
                    line_no,
                    len(token) + 2,
                )
            try:
                vec = np.array([float(v) for v in values])
            except ValueError:
                raise ParseError(f"non-numeric value in vector of '{token}'", path, line_no) from None
            if token in vectors:
                duplicates += 1
                continue
            vectors[token] = vec
    if duplicates:
        logger.warning(f"{path}: {duplicates} repeated tokens ignored, first occurrence kept")
    if not vectors:
        logger.warning(f"{path} holds no vectors")
    return vectors


def load_word_embeddings(
    path: Optional[Union[str, Path]], dim: int, vocab: Vocab, rng: Rng, init_range: float = 0.1
) -> np.ndarray:
    """A ``|V| x dim`` table; rows missing from the file are drawn uniformly."""
    vectors = read_embedding_file(path, dim) if path is not None else {}
    table = rng.generator().uniform(-init_range, init_range, size=(len(vocab.words), dim))
    table[PAD_ID] = 0.0
    found = 0
    for word, idx in vocab.words.items():
        vec = vectors.get(word)
        if vec is not None and idx != PAD_ID:
            table[idx] = vec
            found += 1
    missing = len(vocab.words) - 2 - found
    if missing > 0:
        logger.warning(f"{missing} of {len(vocab.words) - 2} words have no pretrained vector")
    logger.info(f"Word table {table.shape}, {found} rows from {path}")
    return table


def load_contextual(path: Optional[Union[str, Path]]) -> Dict[str, np.ndarray]:
    """Read ``id<TAB>n<TAB>p`` records, each followed by n lines of p floats.

    A missing path yields an empty mapping (the model then runs without
    contextual vectors).
    """
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        logger.warning(f"contextual vector file {path} not found, running without it")
        return {}
    records: Dict[str, np.ndarray] = {}
    dim: Optional[int] = None
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    pos = 0
    while pos < len(lines):
        header = lines[pos]
        pos += 1
        if not header.strip():
            continue
        fields = header.split("\t")
        if len(fields) != 3:
            raise ParseError("expected 'id<TAB>n<TAB>p' header", path, pos)
        example_id = fields[0]
        try:
            n, p = int(fields[1]), int(fields[2])
        except ValueError:
            raise ParseError("vector count and dim must be integers", path, pos) from None
        if dim is None:
            dim = p
        elif p != dim:
            raise ParseError(f"record dim {p} differs from earlier dim {dim}", path, pos)
        if pos + n > len(lines):
            raise ParseError(f"record '{example_id}' announces {n} vectors, file ends early", path, pos)
        block = np.zeros((n, p))
        for k in range(n):
            values = lines[pos + k].split()
            if len(values) != p:
                raise ParseError(f"expected {p} floats, found {len(values)}", path, pos + k + 1)
            block[k] = [float(v) for v in values]
        pos += n
        records[example_id] = block
    logger.info(f"Loaded contextual vectors for {len(records)} sentences from {path}")
    return records


def attach_contextual(examples: Sequence, vectors: Dict[str, np.ndarray]) -> int:
    """Attach vectors by example id; returns their dim (0 when none)."""
    if not vectors:
        return 0
    dim = next(iter(vectors.values())).shape[1]
    for ex in examples:
        block = vectors.get(ex.id)
        if block is None:
            raise AlignmentError(ex.id, len(ex.tokens), 0)
        if block.shape[0] != len(ex.tokens):
            raise AlignmentError(ex.id, len(ex.tokens), block.shape[0])
        ex.contextual = block
    return dim


class CharEncoder:
    """Bidirectional LSTM over the characters of each token."""

    def __init__(self, store: ParamStore, vocab_size: int, embed_dim: int, out_dim: int, prefix: str = "char"):
        self.hidden = out_dim // 2
        self.out_dim = out_dim
        self.embedding = store.create(f"{prefix}.embedding", (vocab_size, embed_dim), init="uniform", limit=0.1)
        self.cells: Dict[str, Tuple[Tensor, Tensor, Tensor]] = {}
        for direction in ("fwd", "bwd"):
            name = f"{prefix}.{direction}"
            self.cells[direction] = (
                store.create(f"{name}.W", (embed_dim, 4 * self.hidden)),
                store.create(f"{name}.U", (self.hidden, 4 * self.hidden)),
                store.create(f"{name}.b", (4 * self.hidden,), init="zeros"),
            )

    def _run(self, direction: str, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        W, U, b = self.cells[direction]
        m, length = ids.shape
        h = nx.constant(np.zeros((m, self.hidden), dtype=W.dtype))
        c = nx.constant(np.zeros((m, self.hidden), dtype=W.dtype))
        H = self.hidden
        for t in range(length):
            x = nx.take(self.embedding, ids[:, t])
            gates = nx.add(nx.add(nx.matmul(x, W), nx.matmul(h, U)), b)
            i = nx.sigmoid(nx.narrow(gates, 1, 0, H))
            f = nx.sigmoid(nx.narrow(gates, 1, H, 2 * H))
            o = nx.sigmoid(nx.narrow(gates, 1, 2 * H, 3 * H))
            g = nx.tanh(nx.narrow(gates, 1, 3 * H, 4 * H))
            c_new = nx.add(nx.mul(f, c), nx.mul(i, g))
            h_new = nx.mul(o, nx.tanh(c_new))
            keep = mask[:, t : t + 1].astype(W.dtype)
            c = nx.add(nx.mul(c_new, keep), nx.mul(c, 1.0 - keep))
            h = nx.add(nx.mul(h_new, keep), nx.mul(h, 1.0 - keep))
        return h

    def encode(self, ids_per_token: Sequence[Sequence[int]]) -> Tensor:
        """``len(ids_per_token) x out_dim``; an empty token reads a single PAD."""
        seqs = [list(ids) if len(ids) else [PAD_ID] for ids in ids_per_token]
        m = len(seqs)
        length = max(len(s) for s in seqs)
        forward = np.zeros((m, length), dtype=np.int64)
        backward = np.zeros((m, length), dtype=np.int64)
        mask = np.zeros((m, length), dtype=bool)
        for k, s in enumerate(seqs):
            forward[k, : len(s)] = s
            backward[k, : len(s)] = s[::-1]
            mask[k, : len(s)] = True
        return nx.concat([self._run("fwd", forward, mask), self._run("bwd", backward, mask)], axis=1)


class TokenEmbedder:
    """Builds the per-token input of both encoders."""

    def __init__(
        self,
        store: ParamStore,
        config: ModelConfig,
        vocab: Vocab,
        word_table: Optional[np.ndarray] = None,
        plm_dim: int = 0,
    ):
        self.config = config
        self.vocab = vocab
        self.plm_dim = plm_dim
        if word_table is None:
            word_table = load_word_embeddings(
                None, config.word_dim, vocab, Rng(config.seed).child("words"), config.oov_init_range
            )
        if word_table.shape != (len(vocab.words), config.word_dim):
            raise ConfigError(
                f"word table {word_table.shape} does not fit vocab {len(vocab.words)} x {config.word_dim}"
            )
        self.words = store.add("embed.words", word_table, frozen=True)
        self.chars = (
            CharEncoder(store, len(vocab.chars), config.char_embed_dim, config.char_out_dim)
            if config.use_char
            else None
        )
        self.d_in = (config.char_out_dim if config.use_char else 0) + config.word_dim + plm_dim
        self.proj_W = store.create("embed.proj.W", (self.d_in, config.hidden_dim))
        self.proj_b = store.create("embed.proj.b", (config.hidden_dim,), init="zeros")

    def encode_chars(self, token: str) -> Tensor:
        """Character vector of one token (``char_out_dim``)."""
        if self.chars is None:
            raise ConfigError("character encoder disabled")
        return nx.reshape(self.chars.encode([self.vocab.char_ids(token)]), (self.chars.out_dim,))

    def token_parts(
        self, tokens: Sequence[str], contextual: Optional[np.ndarray] = None, example_id: str = "<sentence>"
    ) -> Tensor:
        """``n x d_in`` concatenation in the order char, word, plm."""
        parts: List[Tensor] = []
        if self.chars is not None:
            parts.append(self.chars.encode([self.vocab.char_ids(t) for t in tokens]))
        parts.append(nx.embed(self.words, [self.vocab.word_id(t) for t in tokens]))
        if self.plm_dim:
            if contextual is None or contextual.shape != (len(tokens), self.plm_dim):
                got = 0 if contextual is None else contextual.shape[0]
                raise AlignmentError(example_id, len(tokens), got)
            parts.append(nx.constant(contextual.astype(self.words.dtype)))
        return nx.concat(parts, axis=1)

    def __call__(
        self, tokens: Sequence[str], contextual: Optional[np.ndarray] = None, example_id: str = "<sentence>"
    ) -> Tensor:
        """``n x hidden_dim`` projected token representation."""
        x = self.token_parts(tokens, contextual, example_id)
        return nx.add(nx.matmul(x, self.proj_W), self.proj_b)
