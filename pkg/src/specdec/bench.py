"""Benchmark harness: (batch x prompt-length x candidate-count) latency grid.

Each cell times `trials` decodes of exactly `gen_tokens` tokens after one
untimed warmup, recording wall milliseconds per generated token and mean
tokens per step. The k=0 column runs the plain greedy loop with no
speculator work at all, giving the non-speculative baseline; prompts are
shared across the k columns of a row so cells stay comparable.
"""

import json
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .decode import batched_speculative_generate
from .errors import ConfigError
from .model import BaseModel


@dataclass(frozen=True)
class BenchConfig:
    batch_sizes: Tuple[int, ...] = (1, 2, 4)
    prompt_lens: Tuple[int, ...] = (64, 2048)
    k_values: Tuple[int, ...] = (0, 1, 2, 4, 8, 16, 32)
    trials: int = 256
    gen_tokens: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_sizes", "prompt_lens", "k_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if 0 not in self.k_values:
            raise ConfigError("k_values must include the baseline column 0")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.gen_tokens < 1:
            raise ConfigError("gen_tokens must be >= 1")


@dataclass
class BenchGrid:
    cells: Dict[Tuple[int, int, int], dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def cell(self, b: int, p: int, k: int) -> dict:
        return self.cells[(b, p, k)]


def measure_tokens_per_step(model: BaseModel, speculator,
                            prompts: np.ndarray, max_new: int,
                            k: int) -> float:
    """Mean committed tokens per base forward over a prompt set."""
    total_tokens = 0
    total_steps = 0
    for row in np.atleast_2d(prompts):
        _, stats = batched_speculative_generate(model, speculator,
                                                row[None, :], max_new, k)
        total_tokens += stats.total_tokens
        total_steps += stats.total_steps
    return total_tokens / max(1, total_steps)


def run_bench(config: BenchConfig, model: BaseModel, speculator,
              prompt_pool: np.ndarray) -> BenchGrid:
    """Fill the full (b, p, k) grid; cells run sequentially for clean timing.

    `prompt_pool` rows are held-out token windows at least as long as the
    largest requested prompt length.
    """
    pool = np.asarray(prompt_pool, dtype=np.int64)
    if pool.ndim != 2:
        raise ValueError("prompt_pool must be [n, len]")
    if pool.shape[1] < max(config.prompt_lens):
        raise ValueError(f"prompt_pool rows of {pool.shape[1]} shorter than "
                         f"longest prompt {max(config.prompt_lens)}")
    grid = BenchGrid(metadata={
        "trials": config.trials,
        "gen_tokens": config.gen_tokens,
        "seed": config.seed,
        "base_checksum": model.weight_checksum()[:16],
    })
    for p in config.prompt_lens:
        for b in config.batch_sizes:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=config.seed, spawn_key=(b, p)))
            # same prompts for every k in this row
            trial_prompts = [
                pool[rng.integers(0, len(pool), size=b), :p]
                for _ in range(config.trials + 1)]
            for k in config.k_values:
                ms = []
                taus = []
                for trial in range(config.trials + 1):
                    t0 = time.perf_counter()
                    _, stats = batched_speculative_generate(
                        model, speculator, trial_prompts[trial],
                        config.gen_tokens, k)
                    wall_ms = (time.perf_counter() - t0) * 1e3
                    if trial == 0:
                        continue   # warmup excluded from timing
                    ms.append(wall_ms / (b * config.gen_tokens))
                    taus.append(stats.total_tokens / stats.total_steps)
                grid.cells[(b, p, k)] = {
                    "ms_per_token_mean": float(np.mean(ms)),
                    "ms_per_token_std": float(np.std(ms)),
                    "tokens_per_step": float(np.mean(taus)),
                }
    return grid


def _sorted_cells(grid: BenchGrid) -> List[Tuple[Tuple[int, int, int], dict]]:
    return sorted(grid.cells.items(), key=lambda kv: (kv[0][1], kv[0][0], kv[0][2]))


def emit_grid(grid: BenchGrid, fmt: str = "table") -> str:
    """Serialize a grid: 'csv', 'json' or 'table' (one block per prompt len,
    batch rows, k columns, tokens-per-step footer)."""
    if fmt == "csv":
        lines = ["b,p,k,ms_per_token_mean,ms_per_token_std,tokens_per_step"]
        for (b, p, k), cell in _sorted_cells(grid):
            lines.append(f"{b},{p},{k},{cell['ms_per_token_mean']:.4f},"
                         f"{cell['ms_per_token_std']:.4f},"
                         f"{cell['tokens_per_step']:.4f}")
        return "\n".join(lines) + "\n"
    if fmt == "json":
        payload = {
            "metadata": grid.metadata,
            "cells": [{"b": b, "p": p, "k": k, **cell}
                      for (b, p, k), cell in _sorted_cells(grid)],
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"
    if fmt == "table":
        ps = sorted({p for _, p, _ in grid.cells})
        bs = sorted({b for b, _, _ in grid.cells})
        ks = sorted({k for _, _, k in grid.cells})
        blocks = []
        for p in ps:
            head = f"{'ms/tok (' + str(p) + ')':<14}" + "".join(
                f"{k:>9}" for k in ks)
            rows = [head, "-" * len(head)]
            for b in bs:
                rows.append(f"{b:<14}" + "".join(
                    f"{grid.cell(b, p, k)['ms_per_token_mean']:>9.2f}"
                    for k in ks))
            rows.append("-" * len(head))
            # footer: tokens per step averaged across batch sizes
            rows.append(f"{'tok/step':<14}" + "".join(
                f"{np.mean([grid.cell(b, p, k)['tokens_per_step'] for b in bs]):>9.2f}"
                for k in ks))
            blocks.append("\n".join(rows))
        return "\n\n".join(blocks) + "\n"
    raise ValueError(f"unknown format {fmt!r} (csv|json|table)")


def parse_grid(serialized: str) -> BenchGrid:
    """Inverse of emit_grid for the JSON format."""
    payload = json.loads(serialized)
    grid = BenchGrid(metadata=payload["metadata"])
    for cell in payload["cells"]:
        key = (cell["b"], cell["p"], cell["k"])
        grid.cells[key] = {n: cell[n] for n in
                           ("ms_per_token_mean", "ms_per_token_std",
                            "tokens_per_step")}
    return grid
