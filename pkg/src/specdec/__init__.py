"""Desk-scale speculative decoding engine.

A small frozen causal transformer plus a multi-stage MLP speculator that
drafts a tree of candidate tokens from the transformer's state vector and
previously sampled tokens. Candidates are verified in a single batched
forward pass under a tree attention mask; greedy acceptance makes the
output token stream identical to plain greedy decoding.
"""

from .kernels import gelu, layernorm, matmul, softmax
from .corpus import (ByteTokenizer, DocumentStream, SyntheticCorpusSpec,
                     batch_windows, generate_synthetic_corpus)
from .model import BaseModel, BaseModelConfig, KVCache, greedy_next
from .speculator import (CandidateTree, MLPSpeculator, NGramSpeculator,
                         SpeculatorConfig, init_speculator, speculate_tree,
                         stage_forward)
from .decode import (DecodeStats, PrunedCandidateSet, StepResult,
                     batched_speculative_generate, prune_to_topk,
                     speculative_generate, verify_and_accept)
from .training import (TrainConfig, apply_update, lr_at,
                       run_two_stage_training, stage1_batch_loss,
                       stage2_batch_loss, train_base_model)
from .checkpoint import load_checkpoint, save_checkpoint
from .bench import BenchConfig, BenchGrid, emit_grid, run_bench

__version__ = "0.1.0"
