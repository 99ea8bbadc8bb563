"""Multi-stage MLP speculator.

Each stage consumes a state vector plus the embedding of one sampled token,
projects both, and passes the sum through LayerNorm/GeLU to form the next
state; a per-stage head scores the next token. Conditioning on the sampled
token (not just the state, as a plain multi-head MLP would) is what lets
the draft follow a coherent n-gram instead of mixing incompatible
continuations.

Expanding every stage's top tokens breadth-first yields a candidate tree:
a node at depth i stores the token drawn at lookahead i, its log-probability
under that stage's softmax, and the state computed when its parent was
expanded. Sibling nodes share that state; only the token input differs.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .kernels import embedding, gelu, layernorm, log_softmax, matmul

LN_EPS = 1e-5


@dataclass(frozen=True)
class SpeculatorConfig:
    n_stages: int = 3
    d_state: int = 256
    d_base: int = 256
    vocab_size: int = 258
    branching: Tuple[int, ...] = (6, 3, 2)
    state_weight: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(self.branching))
        if self.n_stages < 1:
            raise ConfigError("n_stages must be >= 1")
        if len(self.branching) != self.n_stages:
            raise ConfigError(
                f"branching {self.branching} must have {self.n_stages} entries")
        if any(b < 1 for b in self.branching):
            raise ConfigError("every branch count must be >= 1")
        if not 0.0 < self.state_weight < 1.0:
            raise ConfigError("state_weight must lie in (0, 1)")
        if min(self.d_state, self.d_base, self.vocab_size) < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def stage_mix(self) -> Tuple[float, float]:
        """Scalars (alpha_state, alpha_embed) applied to the two projected
        summands of every stage.

        Chosen so that under unit-variance inputs the state path keeps
        `state_weight` of the variance after n_stages compositions:
        w ** n_stages == state_weight, alpha_state = sqrt(w),
        alpha_embed = sqrt(1 - w).
        """
        w = self.state_weight ** (1.0 / self.n_stages)
        return float(np.sqrt(w)), float(np.sqrt(1.0 - w))

    def d_in(self, stage: int) -> int:
        return self.d_base if stage == 1 else self.d_state

    @property
    def n_leaves(self) -> int:
        return int(np.prod(self.branching))


def expected_param_count(config: SpeculatorConfig) -> int:
    """Closed-form parameter count, checkable against a checkpoint."""
    total = 0
    for i in range(1, config.n_stages + 1):
        total += config.d_in(i) * config.d_state      # state projection
        total += config.vocab_size * config.d_state   # token embedding
        total += 2 * config.d_state                   # layernorm gain/bias
        total += config.d_state * config.vocab_size   # output head
    return total


def stage_names(config: SpeculatorConfig) -> List[str]:
    names = []
    for i in range(1, config.n_stages + 1):
        for part in ("ws", "emb", "ln_g", "ln_b", "head"):
            names.append(f"spec.stage{i}.{part}")
    return names


def init_speculator(config: SpeculatorConfig, seed: int) -> Dict[str, np.ndarray]:
    """Gaussian init, every weight matrix at std d_state ** -0.5.

    No weight is shared across stages; each stage owns its projection,
    embedding table, layernorm and head.
    """
    rng = np.random.default_rng(seed)
    std = config.d_state ** -0.5
    weights = {}
    for i in range(1, config.n_stages + 1):
        p = f"spec.stage{i}."
        weights[p + "ws"] = (rng.standard_normal(
            (config.d_in(i), config.d_state)) * std).astype(np.float32)
        weights[p + "emb"] = (rng.standard_normal(
            (config.vocab_size, config.d_state)) * std).astype(np.float32)
        weights[p + "ln_g"] = np.ones(config.d_state, np.float32)
        weights[p + "ln_b"] = np.zeros(config.d_state, np.float32)
        weights[p + "head"] = (rng.standard_normal(
            (config.d_state, config.vocab_size)) * std).astype(np.float32)
    return weights


def stage_forward(config: SpeculatorConfig, weights: Dict[str, np.ndarray],
                  stage: int, state_in: np.ndarray, token_in
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """One stage: (state, sampled token) -> (next state, next-token logits).

    Accepts a single state vector or a batch of rows. Pure function.
    """
    if not 1 <= stage <= config.n_stages:
        raise ValueError(f"stage {stage} outside [1, {config.n_stages}]")
    p = f"spec.stage{stage}."
    alpha_s, alpha_e = config.stage_mix
    state = np.asarray(state_in)
    squeeze = state.ndim == 1
    if squeeze:
        state = state[None, :]
    tokens = np.atleast_1d(np.asarray(token_in, dtype=np.int64))
    proj = alpha_s * matmul(state, weights[p + "ws"])
    emb = alpha_e * embedding(weights[p + "emb"], tokens)
    mixed = (proj + emb).astype(state.dtype)
    state_out = gelu(layernorm(mixed, weights[p + "ln_g"],
                               weights[p + "ln_b"], LN_EPS))
    state_out = state_out.astype(state.dtype)
    logits = matmul(state_out, weights[p + "head"])
    if squeeze:
        return state_out[0], logits[0]
    return state_out, logits


@dataclass
class CandidateTree:
    """Breadth-first speculative token tree.

    `parent[i]` is -1 for depth-1 nodes (children of the virtual root, the
    last accepted token). `logp[i]` is the edge token's log-probability
    under its stage's softmax; path scores add along root-to-node paths.
    """

    parent: np.ndarray
    depth: np.ndarray
    token: np.ndarray
    logp: np.ndarray
    branching: Tuple[int, ...] = ()
    root_token: int = -1
    states: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.token)

    @property
    def max_depth(self) -> int:
        return int(self.depth.max()) if self.n_nodes else 0

    def leaf_indices(self) -> np.ndarray:
        return np.flatnonzero(self.depth == self.max_depth)

    def path_scores(self) -> np.ndarray:
        scores = np.zeros(self.n_nodes, dtype=np.float64)
        for i in range(self.n_nodes):
            p = self.parent[i]
            scores[i] = self.logp[i] + (scores[p] if p >= 0 else 0.0)
        return scores

    def path_tokens(self, node: int) -> List[int]:
        path = []
        while node >= 0:
            path.append(int(self.token[node]))
            node = int(self.parent[node])
        return path[::-1]


def _top_tokens(logp_rows: np.ndarray, k: int) -> np.ndarray:
    # stable argsort of -logp: descending prob, ties -> lowest token id
    return np.argsort(-logp_rows, axis=-1, kind="stable")[..., :k]


def speculate_tree(speculator: "MLPSpeculator", base_state: np.ndarray,
                   last_token: int) -> CandidateTree:
    """Expand the full branching tree from the latest base-model state."""
    cfg, weights = speculator.config, speculator.weights
    parents: List[int] = []
    depths: List[int] = []
    tokens: List[int] = []
    logps: List[float] = []

    # frontier: state rows + the token that produced each row's next stage input
    states = np.asarray(base_state, dtype=np.float32)[None, :]
    frontier_tokens = np.array([last_token], dtype=np.int64)
    frontier_ids = np.array([-1])  # node index of each frontier row's source
    for stage in range(1, cfg.n_stages + 1):
        b = cfg.branching[stage - 1]
        state_out, logits = stage_forward(cfg, weights, stage,
                                          states, frontier_tokens)
        logp = log_softmax(logits, axis=-1)
        top = _top_tokens(logp, b)                      # [rows, b]
        rows = state_out.shape[0]
        new_ids = np.empty(rows * b, dtype=np.int64)
        for r in range(rows):
            for j in range(b):
                idx = len(tokens)
                new_ids[r * b + j] = idx
                parents.append(int(frontier_ids[r]))
                depths.append(stage)
                tokens.append(int(top[r, j]))
                logps.append(float(logp[r, top[r, j]]))
        if stage < cfg.n_stages:
            states = np.repeat(state_out, b, axis=0)
            frontier_tokens = top.reshape(-1)
            frontier_ids = new_ids
    return CandidateTree(parent=np.array(parents, dtype=np.int64),
                         depth=np.array(depths, dtype=np.int64),
                         token=np.array(tokens, dtype=np.int64),
                         logp=np.array(logps, dtype=np.float64),
                         branching=cfg.branching,
                         root_token=int(last_token))


class MLPSpeculator:
    """Config + weights bundle implementing the speculate protocol."""

    def __init__(self, config: SpeculatorConfig, weights: Dict[str, np.ndarray]):
        self.config = config
        self.weights = weights

    @classmethod
    def fresh(cls, config: SpeculatorConfig, seed: int) -> "MLPSpeculator":
        return cls(config, init_speculator(config, seed))

    @property
    def n_stages(self) -> int:
        return self.config.n_stages

    @property
    def param_count(self) -> int:
        return sum(int(t.size) for t in self.weights.values())

    def stage_forward(self, stage: int, state_in, token_in):
        return stage_forward(self.config, self.weights, stage, state_in, token_in)

    def speculate(self, base_state: np.ndarray, last_token: int,
                  context: Optional[Sequence[int]] = None) -> CandidateTree:
        return speculate_tree(self, base_state, last_token)


class NGramSpeculator:
    """Brute-force n-gram draft source for ceiling studies.

    Predicts from empirical successor counts of the last `order` tokens;
    ignores the base state entirely. Used to confirm how predictable a
    corpus (and a model trained on it) is before judging a trained
    speculator against it.
    """

    def __init__(self, order: int, branching: Sequence[int],
                 vocab_size: int = 258):
        self.order = order
        self.branching = tuple(branching)
        self.n_stages = len(self.branching)
        self.vocab_size = vocab_size
        self._counts: Dict[Tuple[int, ...], Dict[int, int]] = {}
        self._unigram = np.zeros(vocab_size, dtype=np.int64)

    def fit(self, tokens: np.ndarray) -> "NGramSpeculator":
        toks = np.asarray(tokens, dtype=np.int64)
        for i in range(self.order, len(toks)):
            ctx = tuple(int(x) for x in toks[i - self.order:i])
            nxt = int(toks[i])
            self._counts.setdefault(ctx, {})
            self._counts[ctx][nxt] = self._counts[ctx].get(nxt, 0) + 1
            self._unigram[nxt] += 1
        return self

    def _candidates(self, ctx: Tuple[int, ...], k: int) -> List[Tuple[int, float]]:
        """Exactly k (token, logp) pairs, backfilled from unigram stats."""
        out: List[Tuple[int, float]] = []
        seen = set()
        table = self._counts.get(ctx)
        if table:
            total = sum(table.values())
            for tok, c in sorted(table.items(), key=lambda kv: (-kv[1], kv[0]))[:k]:
                out.append((tok, float(np.log(c / total))))
                seen.add(tok)
        if len(out) < k:
            floor = float(-np.log(max(self.vocab_size, 2)) - 20.0)
            for t in np.argsort(-self._unigram, kind="stable"):
                if len(out) >= k:
                    break
                if int(t) not in seen:
                    out.append((int(t), floor))
                    seen.add(int(t))
        return out[:k]

    def speculate(self, base_state, last_token: int,
                  context: Optional[Sequence[int]] = None) -> CandidateTree:
        history = list(context[-self.order:]) if context is not None else []
        history = (history + [int(last_token)])[-self.order:]
        while len(history) < self.order:
            history.insert(0, 0)

        parents: List[int] = []
        depths: List[int] = []
        tokens: List[int] = []
        logps: List[float] = []
        frontier = [(-1, tuple(history))]
        for stage, b in enumerate(self.branching, start=1):
            nxt = []
            for parent_id, ctx in frontier:
                for tok, lp in self._candidates(ctx, b):
                    idx = len(tokens)
                    parents.append(parent_id)
                    depths.append(stage)
                    tokens.append(tok)
                    logps.append(lp)
                    nxt.append((idx, ctx[1:] + (tok,)))
            frontier = nxt
        return CandidateTree(parent=np.array(parents, dtype=np.int64),
                             depth=np.array(depths, dtype=np.int64),
                             token=np.array(tokens, dtype=np.int64),
                             logp=np.array(logps, dtype=np.float64),
                             branching=self.branching,
                             root_token=int(last_token))
