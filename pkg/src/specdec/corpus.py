"""Tokenization and data ingestion.

Byte-level tokenizer (256 byte ids + BOS + PAD), document loading from text
files, and a seeded Markov generator whose per-position predictability is
tunable -- the desk-scale stand-in for a real text corpus. Window batching
for training is non-overlapping with PAD fill on the last partial window.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError

VOCAB_SIZE = 258
BOS = 256
PAD = 257


class ByteTokenizer:
    """Byte-level tokenizer: ids 0..255 are raw bytes, plus BOS and PAD."""

    vocab_size = VOCAB_SIZE
    bos = BOS
    pad = PAD

    def encode(self, text: Union[str, bytes]) -> np.ndarray:
        """Encode to token ids, BOS prepended."""
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        out = np.empty(len(data) + 1, dtype=np.int64)
        out[0] = BOS
        out[1:] = np.frombuffer(data, dtype=np.uint8)
        return out

    def decode(self, ids: Sequence[int]) -> bytes:
        """Decode back to bytes, dropping BOS/PAD."""
        arr = np.asarray(ids, dtype=np.int64)
        keep = arr[arr < 256]
        return keep.astype(np.uint8).tobytes()


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Seeded Markov source with a controllable fraction of forced transitions.

    With probability `determinism` the next token is a fixed function of the
    previous `pattern_order` tokens; otherwise it is uniform over the
    alphabet. Small alphabets keep the transition table learnable at desk
    scale.
    """

    seed: int = 0
    pattern_order: int = 3
    determinism: float = 0.9
    alphabet_size: int = 16

    def __post_init__(self):
        if not 0.0 <= self.determinism <= 1.0:
            raise ConfigError(f"determinism must be in [0,1], got {self.determinism}")
        if self.pattern_order < 1:
            raise ConfigError("pattern_order must be >= 1")
        if not 2 <= self.alphabet_size <= 256:
            raise ConfigError("alphabet_size must be in [2, 256]")
        if self.alphabet_size ** self.pattern_order > 4_000_000:
            raise ConfigError("alphabet_size ** pattern_order too large to tabulate")


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; platform-independent uint64 arithmetic
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


def forced_transition_table(spec: SyntheticCorpusSpec) -> np.ndarray:
    """Forced successor for every length-`pattern_order` context.

    Index i encodes the context in base `alphabet_size`, most recent token
    in the lowest digit.
    """
    n = spec.alphabet_size ** spec.pattern_order
    idx = np.arange(n, dtype=np.uint64)
    mixed = _mix64(idx ^ _mix64(np.uint64(spec.seed)))
    return (mixed % np.uint64(spec.alphabet_size)).astype(np.int64)


@dataclass
class DocumentStream:
    """Deterministic sequence of token-id documents."""

    source: str
    truncation: int
    documents: List[np.ndarray] = field(repr=False, default_factory=list)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.documents)

    def flat_tokens(self) -> np.ndarray:
        if not self.documents:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(self.documents)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, n_tokens: int,
                              truncation: int = 0) -> DocumentStream:
    """Generate `n_tokens` Markov tokens; reproducible from the spec alone."""
    if n_tokens <= 0:
        raise ConfigError("n_tokens must be positive")
    table = forced_transition_table(spec)
    a = spec.alphabet_size
    order = spec.pattern_order
    rng = np.random.default_rng(spec.seed)
    forced = rng.random(n_tokens) < spec.determinism
    randoms = rng.integers(0, a, size=n_tokens)

    tokens = np.empty(n_tokens, dtype=np.int64)
    ctx = 0  # rolling base-a context code, seeded from the initial history
    init = rng.integers(0, a, size=order)
    for t in init:
        ctx = (ctx * a + int(t)) % table.size
    tbl = table  # local alias for the tight loop
    for i in range(n_tokens):
        tok = int(tbl[ctx]) if forced[i] else int(randoms[i])
        tokens[i] = tok
        ctx = (ctx * a + tok) % tbl.size

    trunc = truncation if truncation > 0 else n_tokens
    docs = [tokens[i:i + trunc] for i in range(0, n_tokens, trunc)]
    return DocumentStream(source=f"synthetic(seed={spec.seed})",
                          truncation=trunc, documents=docs)


def load_documents(paths: Iterable[Union[str, Path]], truncation: int,
                   tokenizer: ByteTokenizer = None,
                   split_lines: bool = False) -> DocumentStream:
    """Load text files as token documents; one per file, or one per line."""
    tok = tokenizer or ByteTokenizer()
    docs = []
    names = []
    for p in paths:
        p = Path(p)
        names.append(str(p))
        raw = p.read_bytes()
        parts = raw.splitlines() if split_lines else [raw]
        for part in parts:
            if part:
                docs.append(tok.encode(part)[:truncation])
    return DocumentStream(source=";".join(names), truncation=truncation,
                          documents=docs)


def batch_windows(stream: DocumentStream, seq_len: int,
                  batch: int) -> Iterator[np.ndarray]:
    """Chop the stream into non-overlapping [batch, seq_len] token windows.

    The last partial window is PAD-filled; the last partial batch gets
    all-PAD rows. Total non-PAD tokens equal the stream length.
    """
    if seq_len < 2:
        raise DataError("seq_len must be >= 2")
    if batch < 1:
        raise DataError("batch must be >= 1")
    flat = stream.flat_tokens()
    if flat.size == 0:
        return
    n_windows = -(-flat.size // seq_len)
    padded = np.full(n_windows * seq_len, PAD, dtype=np.int64)
    padded[:flat.size] = flat
    windows = padded.reshape(n_windows, seq_len)
    for start in range(0, n_windows, batch):
        chunk = windows[start:start + batch]
        if chunk.shape[0] < batch:
            fill = np.full((batch - chunk.shape[0], seq_len), PAD, dtype=np.int64)
            chunk = np.concatenate([chunk, fill], axis=0)
        yield chunk


def window_pool(stream: DocumentStream, seq_len: int) -> np.ndarray:
    """All complete seq_len windows as one [n, seq_len] array (no padding)."""
    flat = stream.flat_tokens()
    n = flat.size // seq_len
    if n == 0:
        raise DataError(f"stream too short for even one window of {seq_len}")
    return flat[:n * seq_len].reshape(n, seq_len).copy()
