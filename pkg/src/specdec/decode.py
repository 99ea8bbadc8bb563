"""Speculative decoding loop.

Per step: prune the candidate tree to the k best root-to-leaf paths, flatten
them into a deduplicated token block behind the pending token, verify the
whole block in one base-model forward under a tree attention mask, then
commit the longest prefix on which some candidate matched the base model's
own greedy outputs. Accepted tokens are the base model's outputs, so greedy
speculative decoding emits exactly the plain greedy token stream -- the
speculator only controls how many steps that takes.
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityError
from .model import BaseModel, KVCache, forward, greedy_next
from .speculator import CandidateTree


@dataclass
class PrunedCandidateSet:
    """Top-k candidate paths flattened into a shared verification block.

    Block position 0 is the pending root token; nodes occupy positions
    1..n_flat in parents-before-children order, each appearing once even
    when shared by several candidates. `mask[i, j]` marks block position j
    visible to position i (cached positions are always visible and are not
    part of this mask).
    """

    k: int
    root_token: int
    candidates: np.ndarray     # [k, depth] token paths, best path first
    path_slots: np.ndarray     # [k, depth] block position of each path node
    block_tokens: np.ndarray   # [n_flat] deduplicated node tokens
    block_depth: np.ndarray    # [n_flat]
    mask: np.ndarray           # [1 + n_flat, 1 + n_flat] bool
    dedup_saved: int           # k*depth - n_flat

    @property
    def depth(self) -> int:
        return self.candidates.shape[1]

    @property
    def block_size(self) -> int:
        return 1 + len(self.block_tokens)


@dataclass
class StepResult:
    accepted_tokens: List[int]
    tokens_this_step: int
    winning_candidate: int
    state: np.ndarray          # state vector at the last committed position
    last_token: int            # pending token for the next speculation


@dataclass
class DecodeStats:
    total_tokens: int = 0
    total_steps: int = 0
    wall_ms_per_token: float = 0.0
    spec_calls: int = 0
    dedup_saved: int = 0

    @property
    def tokens_per_step(self) -> float:
        return self.total_tokens / max(1, self.total_steps)


def prune_to_topk(tree: CandidateTree, k: int) -> PrunedCandidateSet:
    """Keep the k leaves with the highest summed edge log-probability.

    Ranking is a total order (score desc, then token path ascending), so the
    top-k set is nested in the top-(k+1) set. Shared path prefixes collapse
    to single block nodes.
    """
    leaves = tree.leaf_indices()
    if not 1 <= k <= len(leaves):
        raise ValueError(f"k={k} outside [1, {len(leaves)}]")
    scores = tree.path_scores()
    ranked = sorted(leaves,
                    key=lambda n: (-scores[n], tree.path_tokens(int(n))))
    chosen = ranked[:k]

    depth = tree.max_depth
    node_to_slot = {}
    block_nodes: List[int] = []
    paths = np.zeros((k, depth), dtype=np.int64)
    slots = np.zeros((k, depth), dtype=np.int64)
    for ci, leaf in enumerate(chosen):
        chain = []
        n = int(leaf)
        while n >= 0:
            chain.append(n)
            n = int(tree.parent[n])
        chain.reverse()
        for d, n in enumerate(chain):
            if n not in node_to_slot:
                node_to_slot[n] = len(block_nodes) + 1   # 0 is the root
                block_nodes.append(n)
            paths[ci, d] = tree.token[n]
            slots[ci, d] = node_to_slot[n]

    n_flat = len(block_nodes)
    mask = np.zeros((1 + n_flat, 1 + n_flat), dtype=bool)
    mask[0, 0] = True
    for n in block_nodes:
        s = node_to_slot[n]
        mask[s, s] = True
        mask[s, 0] = True
        p = int(tree.parent[n])
        while p >= 0:
            mask[s, node_to_slot[p]] = True
            p = int(tree.parent[p])

    return PrunedCandidateSet(
        k=k, root_token=int(tree.root_token),
        candidates=paths, path_slots=slots,
        block_tokens=tree.token[block_nodes].astype(np.int64),
        block_depth=tree.depth[block_nodes].astype(np.int64),
        mask=mask, dedup_saved=k * depth - n_flat)


def _acceptance_lengths(pruned: PrunedCandidateSet,
                        greedy_ids: np.ndarray) -> np.ndarray:
    """Matched-prefix length per candidate given block greedy outputs."""
    k, depth = pruned.candidates.shape
    lengths = np.zeros(k, dtype=np.int64)
    for i in range(k):
        prev_slot = 0
        n = 0
        for j in range(depth):
            if pruned.candidates[i, j] != greedy_ids[prev_slot]:
                break
            n += 1
            prev_slot = pruned.path_slots[i, j]
        lengths[i] = n
    return lengths


def _commit(pruned: PrunedCandidateSet, greedy_ids: np.ndarray,
            lengths: np.ndarray) -> Tuple[int, int, List[int], List[int]]:
    """Pick the winner and enumerate committed block slots + output tokens."""
    winner = int(np.argmax(lengths))       # first max = best speculator score
    n = int(lengths[winner])
    slots = [0] + [int(pruned.path_slots[winner, j]) for j in range(n)]
    accepted = [int(greedy_ids[s]) for s in slots]
    return winner, n, slots, accepted


def verify_and_accept(model: BaseModel, cache: KVCache,
                      pruned: PrunedCandidateSet) -> StepResult:
    """One base forward over [root + block]; commit the best matched prefix.

    The cache ends at committed length + accepted tokens: the root slot plus
    the winner's matched node slots are kept (their key/values are exact,
    since each node attended precisely to its own prefix), everything else
    is rolled back.
    """
    committed = int(cache.filled[0])
    tokens = np.concatenate([[pruned.root_token],
                             pruned.block_tokens]).astype(np.int64)
    logits, states = forward(model, tokens[None, :], cache, pruned.mask)
    greedy_ids = np.argmax(logits[0], axis=-1)

    lengths = _acceptance_lengths(pruned, greedy_ids)
    winner, n, slots, accepted = _commit(pruned, greedy_ids, lengths)

    if n > 0:
        cache.copy_slots(0, committed + np.array(slots[1:], dtype=np.int64),
                         committed + 1)
    cache.rollback(committed + n + 1)
    return StepResult(accepted_tokens=accepted, tokens_this_step=n + 1,
                      winning_candidate=winner,
                      state=states[0, slots[-1]].copy(),
                      last_token=accepted[-1])


def greedy_generate(model: BaseModel, prompt: Sequence[int], max_new: int,
                    cache: Optional[KVCache] = None
                    ) -> Tuple[np.ndarray, DecodeStats]:
    """Plain greedy loop; the non-speculative baseline. Never builds a tree."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    prompt = np.asarray(prompt, dtype=np.int64)
    if len(prompt) + max_new > model.config.max_seq:
        raise CapacityError(
            f"prompt {len(prompt)} + max_new {max_new} exceeds "
            f"max_seq {model.config.max_seq}")
    cache = cache or model.fresh_cache(1)
    stats = DecodeStats()
    t0 = time.perf_counter()
    logits, _ = forward(model, prompt[None, :], cache)
    out = [greedy_next(logits[0, -1])]
    stats.total_steps = 1
    while len(out) < max_new:
        logits, _ = forward(model, np.array([[out[-1]]], dtype=np.int64), cache)
        out.append(greedy_next(logits[0, 0]))
        stats.total_steps += 1
    stats.total_tokens = len(out)
    stats.wall_ms_per_token = (time.perf_counter() - t0) * 1e3 / max_new
    return np.array(out, dtype=np.int64), stats


def speculative_generate(model: BaseModel, speculator, prompt: Sequence[int],
                         max_new: int, k: int
                         ) -> Tuple[np.ndarray, DecodeStats]:
    """Generate exactly `max_new` greedy tokens, speculating k candidates.

    k=0 falls back to the plain loop. The output token sequence is identical
    to the k=0 sequence for every k; only the step count changes.
    """
    if k == 0:
        return greedy_generate(model, prompt, max_new)
    if k < 0:
        raise ValueError("k must be >= 0")
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    prompt = np.asarray(prompt, dtype=np.int64)
    if len(prompt) >= model.config.max_seq:
        raise CapacityError(f"prompt of {len(prompt)} exceeds max_seq")

    cache = model.fresh_cache(1)
    stats = DecodeStats()
    t0 = time.perf_counter()
    logits, states = forward(model, prompt[None, :], cache)
    pending = greedy_next(logits[0, -1])
    state = states[0, -1].copy()
    out = [pending]
    committed = list(prompt)
    stats.total_steps = 1
    while len(out) < max_new:
        tree = speculator.speculate(state, pending, context=committed)
        stats.spec_calls += 1
        pruned = prune_to_topk(tree, min(k, len(tree.leaf_indices())))
        stats.dedup_saved += pruned.dedup_saved
        res = verify_and_accept(model, cache, pruned)
        stats.total_steps += 1
        committed.append(pending)
        committed.extend(res.accepted_tokens[:-1])
        out.extend(res.accepted_tokens)
        state, pending = res.state, res.last_token
    out = out[:max_new]
    stats.total_tokens = len(out)
    stats.wall_ms_per_token = (time.perf_counter() - t0) * 1e3 / max_new
    return np.array(out, dtype=np.int64), stats


def _batched_block(pruned_rows: List[Optional[PrunedCandidateSet]],
                   pendings: List[int]
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Pad per-row verification blocks to a common width."""
    widths = [p.block_size if p else 1 for p in pruned_rows]
    w = max(widths)
    b = len(pruned_rows)
    tokens = np.zeros((b, w), dtype=np.int64)
    mask = np.zeros((b, w, w), dtype=bool)
    mask[:, np.arange(w), np.arange(w)] = True   # padding attends to itself
    for i, p in enumerate(pruned_rows):
        if p is None:
            tokens[i, 0] = pendings[i]
            continue
        s = p.block_size
        tokens[i, :s] = np.concatenate([[p.root_token], p.block_tokens])
        mask[i, :s, :s] = p.mask
    return tokens, mask


def batched_speculative_generate(model: BaseModel, speculator,
                                 prompts: np.ndarray, max_new: int, k: int
                                 ) -> Tuple[np.ndarray, DecodeStats]:
    """Decode b uniform-length prompts in lockstep; one forward per step.

    Each row's output equals its unbatched counterpart exactly. Rows that
    finish early keep stepping with a bare root block until all are done;
    their surplus tokens are discarded.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim != 2:
        raise ValueError("prompts must be [batch, prompt_len]")
    b, p_len = prompts.shape
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if p_len >= model.config.max_seq:
        raise CapacityError(f"prompt of {p_len} exceeds max_seq")

    stats = DecodeStats()
    t0 = time.perf_counter()
    if k == 0:
        cache = model.fresh_cache(b)
        logits, _ = forward(model, prompts, cache)
        outs = [[greedy_next(logits[i, -1])] for i in range(b)]
        steps_per_row = np.ones(b, dtype=np.int64)
        for _ in range(max_new - 1):
            block = np.array([[o[-1]] for o in outs], dtype=np.int64)
            logits, _ = forward(model, block, cache)
            for i in range(b):
                outs[i].append(greedy_next(logits[i, 0]))
            steps_per_row += 1
        stats.total_steps = int(steps_per_row.sum())
        stats.total_tokens = b * max_new
        stats.wall_ms_per_token = (time.perf_counter() - t0) * 1e3 / (b * max_new)
        return np.array(outs, dtype=np.int64), stats

    cache = model.fresh_cache(b)
    logits, states = forward(model, prompts, cache)
    pendings = [greedy_next(logits[i, -1]) for i in range(b)]
    state_rows = [states[i, -1].copy() for i in range(b)]
    outs: List[List[int]] = [[pendings[i]] for i in range(b)]
    committed: List[List[int]] = [list(prompts[i]) for i in range(b)]
    steps_per_row = np.ones(b, dtype=np.int64)

    while any(len(o) < max_new for o in outs):
        pruned_rows: List[Optional[PrunedCandidateSet]] = []
        for i in range(b):
            if len(outs[i]) >= max_new:
                pruned_rows.append(None)
                continue
            tree = speculator.speculate(state_rows[i], pendings[i],
                                        context=committed[i])
            stats.spec_calls += 1
            pr = prune_to_topk(tree, min(k, len(tree.leaf_indices())))
            stats.dedup_saved += pr.dedup_saved
            pruned_rows.append(pr)
        tokens, mask = _batched_block(pruned_rows, pendings)
        base_filled = cache.filled.copy()
        logits, states = forward(model, tokens, cache, mask)
        new_filled = np.empty(b, dtype=np.int64)
        for i in range(b):
            pr = pruned_rows[i]
            if pr is None:
                # finished row: bare root block, surplus token discarded
                new_filled[i] = base_filled[i] + 1
                committed[i].append(pendings[i])
                pendings[i] = greedy_next(logits[i, 0])
                state_rows[i] = states[i, 0].copy()
                continue
            greedy_ids = np.argmax(logits[i, :pr.block_size], axis=-1)
            lengths = _acceptance_lengths(pr, greedy_ids)
            _, n, slots, accepted = _commit(pr, greedy_ids, lengths)
            if n > 0:
                cache.copy_slots(i, base_filled[i] + np.array(slots[1:]),
                                 int(base_filled[i]) + 1)
            new_filled[i] = base_filled[i] + n + 1
            committed[i].append(pendings[i])
            committed[i].extend(accepted[:-1])
            outs[i].extend(accepted)
            pendings[i] = accepted[-1]
            state_rows[i] = states[i, slots[-1]].copy()
            steps_per_row[i] += 1
        cache.rollback(new_filled)

    result = np.array([o[:max_new] for o in outs], dtype=np.int64)
    stats.total_steps = int(steps_per_row.sum())
    stats.total_tokens = b * max_new
    stats.wall_ms_per_token = (time.perf_counter() - t0) * 1e3 / (b * max_new)
    return result, stats
