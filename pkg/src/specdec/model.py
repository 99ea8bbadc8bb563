"""Frozen small causal transformer with a KV cache.

The decode-path forward accepts a block of new tokens plus an attention mask
over (cached positions + block), so one pass can score a whole candidate
tree. Every reduction on this path has a fixed, batch-shape-independent
summation order: the logits for a token depend only on its own visible
prefix, never on what else happened to share the forward. Greedy
equivalence between plain decoding and tree verification rests on that.

Positions are logical, not physical: a block token's position id is derived
from its mask row (cache length + number of visible block ancestors), so
sibling tree nodes share a position while occupying distinct cache slots.
"""

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CapacityError, ConfigError, MaskError
from .kernels import embedding, gelu, layernorm, matmul, matmul3

LN_EPS = 1e-5


@dataclass(frozen=True)
class BaseModelConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    vocab_size: int = 258
    max_seq: int = 1024
    seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ff,
               self.vocab_size, self.max_seq) < 1:
            raise ConfigError("all base model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _init_weights(config: BaseModelConfig) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    proj_std = d ** -0.5
    resid_std = proj_std / np.sqrt(2.0 * config.n_layers)

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    w = {
        "tok_emb": normal((v, d), 0.02),
        "pos_emb": normal((config.max_seq, d), 0.02),
        "ln_f_g": np.ones(d, np.float32),
        "ln_f_b": np.zeros(d, np.float32),
        "head": normal((d, v), proj_std),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        w[p + "ln1_g"] = np.ones(d, np.float32)
        w[p + "ln1_b"] = np.zeros(d, np.float32)
        w[p + "wq"] = normal((d, d), proj_std)
        w[p + "wk"] = normal((d, d), proj_std)
        w[p + "wv"] = normal((d, d), proj_std)
        w[p + "wo"] = normal((d, d), resid_std)
        w[p + "ln2_g"] = np.ones(d, np.float32)
        w[p + "ln2_b"] = np.zeros(d, np.float32)
        w[p + "w1"] = normal((d, dff), proj_std)
        w[p + "w2"] = normal((dff, d), resid_std)
    return w


class BaseModel:
    """Immutable weights + config. Construct via `init_base_model`."""

    def __init__(self, config: BaseModelConfig, weights: Dict[str, np.ndarray]):
        self.config = config
        self.weights = weights

    @property
    def param_count(self) -> int:
        return sum(int(t.size) for t in self.weights.values())

    def weight_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()

    def fresh_cache(self, batch: int = 1) -> "KVCache":
        return KVCache(self.config, batch)


def init_base_model(config: BaseModelConfig) -> BaseModel:
    """Seeded deterministic init; same config -> bit-identical weights."""
    return BaseModel(config, _init_weights(config))


class KVCache:
    """Per-layer key/value slots for one decode session.

    Slots below `filled` are committed and append-only; `rollback` is the
    only way to shrink. `filled` is tracked per batch row so rows may commit
    different numbers of speculated tokens per step.
    """

    def __init__(self, config: BaseModelConfig, batch: int):
        shape = (batch, config.n_heads, config.max_seq, config.head_dim)
        self.k: List[np.ndarray] = [np.zeros(shape, np.float32)
                                    for _ in range(config.n_layers)]
        self.v: List[np.ndarray] = [np.zeros(shape, np.float32)
                                    for _ in range(config.n_layers)]
        self.filled = np.zeros(batch, dtype=np.int64)
        self.batch = batch
        self.max_seq = config.max_seq

    def rollback(self, to_len) -> "KVCache":
        """Discard cache entries beyond `to_len` (int, or one length per row)."""
        to = np.broadcast_to(np.asarray(to_len, dtype=np.int64),
                             self.filled.shape).copy()
        if np.any(to < 0) or np.any(to > self.filled):
            raise ValueError(f"rollback target {to} outside [0, {self.filled}]")
        self.filled = to
        return self

    def copy_slots(self, row: int, src_slots: np.ndarray, dest_start: int) -> None:
        """Move verified block slots into contiguous committed positions."""
        n = len(src_slots)
        for layer in range(len(self.k)):
            self.k[layer][row, :, dest_start:dest_start + n] = \
                self.k[layer][row][:, src_slots]
            self.v[layer][row, :, dest_start:dest_start + n] = \
                self.v[layer][row][:, src_slots]

    def clone(self) -> "KVCache":
        out = object.__new__(KVCache)
        out.k = [a.copy() for a in self.k]
        out.v = [a.copy() for a in self.v]
        out.filled = self.filled.copy()
        out.batch = self.batch
        out.max_seq = self.max_seq
        return out


def rollback(cache: KVCache, to_len) -> KVCache:
    return cache.rollback(to_len)


def _block_mask(mask: Optional[np.ndarray], batch: int, t: int,
                filled: np.ndarray) -> np.ndarray:
    """Normalize the user mask to per-row [b, t, t] over the new block.

    Accepted forms: None (causal), [t, t] or [b, t, t] over the block, or
    the spec-shaped [t, filled+t] where the cache region must be all-visible
    (requires a uniform committed length).
    """
    if mask is None:
        block = np.tril(np.ones((t, t), dtype=bool))
        return np.broadcast_to(block, (batch, t, t))
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2 and mask.shape == (t, t):
        block = mask
    elif mask.ndim == 3 and mask.shape == (batch, t, t):
        block = mask
    elif mask.ndim == 2 and mask.shape[0] == t:
        f = int(filled[0])
        if np.any(filled != f):
            raise MaskError("cache-absolute mask requires a uniform filled length")
        if mask.shape[1] != f + t:
            raise MaskError(f"mask shape {mask.shape} != ({t}, {f + t})")
        if not mask[:, :f].all():
            raise MaskError("new tokens must attend to all cached positions")
        block = mask[:, f:]
    else:
        raise MaskError(f"unrecognized mask shape {mask.shape} for block of {t}")
    if block.ndim == 2:
        block = np.broadcast_to(block, (batch, t, t))
    if not block[:, np.arange(t), np.arange(t)].all():
        raise MaskError("every token must attend to itself")
    if np.any(np.triu(block, k=1)):
        raise MaskError("mask lets a token attend to a later position")
    return block


def forward(model: BaseModel, tokens: np.ndarray, cache: KVCache,
            mask: Optional[np.ndarray] = None
            ) -> Tuple[np.ndarray, np.ndarray]:
    """Score a block of new tokens against the cache under an attention mask.

    Returns (logits [b, t, vocab], states [b, t, d_model]) where states are
    the final-layer pre-logit hidden vectors. The cache is appended by t
    slots per row.
    """
    cfg, w = model.config, model.weights
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    b, t = tokens.shape
    if b != cache.batch:
        raise ValueError(f"token batch {b} != cache batch {cache.batch}")
    if np.any(cache.filled + t > cfg.max_seq):
        raise CapacityError(
            f"cache {cache.filled} + block {t} exceeds max_seq {cfg.max_seq}")

    block = _block_mask(mask, b, t, cache.filled)
    # logical position = committed length + visible block ancestors (self incl.) - 1
    depth = block.sum(axis=2) - 1                     # [b, t]
    pos_ids = cache.filled[:, None] + depth
    h_dim, n_heads = cfg.head_dim, cfg.n_heads
    scale = np.float32(1.0 / np.sqrt(h_dim))
    neg_inf = np.float32(-np.inf)

    x = embedding(w["tok_emb"], tokens) + embedding(w["pos_emb"], pos_ids)
    x = x.astype(np.float32)
    ones_col = np.ones((n_heads, 1, 1), np.float32)

    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        a = layernorm(x, w[p + "ln1_g"], w[p + "ln1_b"], LN_EPS)
        flat = a.reshape(b * t, cfg.d_model)
        q = matmul(flat, w[p + "wq"]).reshape(b, t, n_heads, h_dim)
        k = matmul(flat, w[p + "wk"]).reshape(b, t, n_heads, h_dim)
        v = matmul(flat, w[p + "wv"]).reshape(b, t, n_heads, h_dim)
        attn_out = np.empty((b, t, n_heads, h_dim), np.float32)
        for i in range(b):
            f = int(cache.filled[i])
            self_k, self_v = cache.k[layer], cache.v[layer]
            self_k[i, :, f:f + t] = k[i].transpose(1, 0, 2)
            self_v[i, :, f:f + t] = v[i].transpose(1, 0, 2)
            keys = self_k[i, :, :f + t]                         # [H, f+t, dh]
            scores = matmul3(q[i].transpose(1, 0, 2),
                             keys.transpose(0, 2, 1)) * scale   # [H, t, f+t]
            scores[:, ~np.concatenate(
                [np.ones((t, f), bool), block[i]], axis=1)] = neg_inf
            # normalize after the value contraction: the denominator is a
            # matmul too, so masked slots contribute exact zeros and the
            # result is independent of block width
            e = np.exp(scores - np.max(scores, axis=2, keepdims=True))
            vals = self_v[i, :, :f + t]
            ext = np.concatenate(
                [vals, np.broadcast_to(ones_col, (n_heads, f + t, 1))], axis=2)
            num = matmul3(e, np.ascontiguousarray(ext))         # [H, t, dh+1]
            attn_out[i] = (num[:, :, :h_dim] / num[:, :, h_dim:]).transpose(1, 0, 2)
        o = matmul(attn_out.reshape(b * t, cfg.d_model), w[p + "wo"])
        x = x + o.reshape(b, t, cfg.d_model)
        a2 = layernorm(x, w[p + "ln2_g"], w[p + "ln2_b"], LN_EPS)
        flat2 = a2.reshape(b * t, cfg.d_model)
        hmid = gelu(matmul(flat2, w[p + "w1"])).astype(np.float32)
        ff = matmul(hmid, w[p + "w2"])
        x = x + ff.reshape(b, t, cfg.d_model)

    states = layernorm(x, w["ln_f_g"], w["ln_f_b"], LN_EPS)
    logits = matmul(states.reshape(b * t, cfg.d_model), w["head"])
    cache.filled = cache.filled + t
    return logits.reshape(b, t, cfg.vocab_size), states


def greedy_next(logits_row: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest token id."""
    return int(np.argmax(logits_row))
