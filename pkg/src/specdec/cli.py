"""Command-line entry points: train-base, train-spec, generate, bench, inspect.

Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures (with a
one-line `error: ...` on stderr). SPECDEC_THREADS caps BLAS parallelism.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bench import emit_grid, run_bench
from .checkpoint import (checkpoint_summary, load_base_model, load_speculator,
                         save_base_model, save_speculator)
from .config import RunConfig, load_run_config
from .corpus import ByteTokenizer, generate_synthetic_corpus, load_documents
from .decode import speculative_generate
from .model import init_base_model
from .speculator import SpeculatorConfig, expected_param_count
from .training import (run_two_stage_training, split_windows,
                       train_base_model, window_pool, write_loss_csv)


def _corpus_stream(run: RunConfig):
    cc = run.corpus
    if cc.kind == "synthetic":
        return generate_synthetic_corpus(cc.synthetic_spec(), cc.n_tokens)
    return load_documents(cc.paths, cc.truncation or run.train.stage1_seq_len,
                          split_lines=cc.split_lines)


def _with_seed(cfg, seed):
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, seed=seed)


def cmd_train_base(args) -> int:
    run = load_run_config(args.config)
    stream = _corpus_stream(run)
    model = init_base_model(_with_seed(run.base_model, args.seed))
    losses = train_base_model(model, stream,
                              _with_seed(run.base_train, args.seed),
                              log_every=args.log_every)
    save_base_model(args.out, model)
    print(f"trained base model: {len(losses)} steps, "
          f"final loss {losses[-1]:.4f}, saved to {args.out}")
    return 0


def cmd_train_spec(args) -> int:
    run = load_run_config(args.config)
    stream = _corpus_stream(run)
    base = load_base_model(args.base)
    spec_cfg = dataclasses.replace(run.speculator,
                                   d_base=base.config.d_model,
                                   vocab_size=base.config.vocab_size)
    train_cfg = _with_seed(run.train, args.seed)
    speculator, reports, _ = run_two_stage_training(
        train_cfg, base, stream, spec_config=spec_cfg,
        state_path=Path(args.state) if args.state else None,
        resume_from=Path(args.resume) if args.resume else None,
        log_every=args.log_every)
    save_speculator(args.out, speculator)
    if args.loss_csv:
        write_loss_csv(Path(args.loss_csv), reports)
    print(f"trained speculator: {len(reports)} steps, saved to {args.out}")
    return 0


def cmd_generate(args) -> int:
    base = load_base_model(args.base)
    speculator = load_speculator(args.speculator) if args.speculator else None
    if args.k > 0 and speculator is None:
        raise ValueError("--speculator is required when --k > 0")
    tok = ByteTokenizer()
    prompt = tok.encode(args.prompt)
    out, stats = speculative_generate(base, speculator, prompt,
                                      args.max_new, args.k)
    text = tok.decode(out)
    sys.stdout.buffer.write(text + b"\n")
    print(f"[tokens/step {stats.tokens_per_step:.2f}  "
          f"steps {stats.total_steps}  "
          f"ms/token {stats.wall_ms_per_token:.2f}]", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    run = load_run_config(args.config)
    base = load_base_model(args.base)
    speculator = load_speculator(args.speculator) if args.speculator else None
    bench_cfg = _with_seed(run.bench, args.seed)
    if max(bench_cfg.k_values) > 0 and speculator is None:
        raise ValueError("--speculator is required for k > 0 columns")
    stream = _corpus_stream(run)
    pool = window_pool(stream, max(bench_cfg.prompt_lens))
    _, held_out = split_windows(pool)
    grid = run_bench(bench_cfg, base, speculator, held_out)
    report = emit_grid(grid, args.format)
    if args.out:
        Path(args.out).write_text(report)
        print(f"wrote {args.out}")
    else:
        print(report, end="")
    return 0


def cmd_inspect(args) -> int:
    summary = checkpoint_summary(args.checkpoint)
    cfg = summary["config"]
    print(f"kind: {cfg.get('kind', 'unknown')}")
    print(f"param_count: {summary['param_count']}")
    print(f"file_sha256: {summary['file_sha256']}")
    if cfg.get("kind") == "speculator":
        spec_cfg = SpeculatorConfig(**{k: v for k, v in cfg.items()
                                       if k != "kind"})
        print(f"expected_param_count: {expected_param_count(spec_cfg)}")
    for name, meta in summary["tensors"].items():
        print(f"  {name:<28} {str(meta['shape']):<18} "
              f"params {meta['params']:<10} sha {meta['sha256']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specdec",
        description="desk-scale speculative decoding: train, generate, bench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override config seeds")

    p = sub.add_parser("train-base", help="pretrain the base model")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-spec", help="two-stage speculator training")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--state", default=None, help="resumable state path")
    p.add_argument("--resume", default=None, help="resume from state path")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train_spec)

    p = sub.add_parser("generate", help="greedy generation, optionally speculative")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--speculator", default=None)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--k", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="latency/tokens-per-step grid")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--speculator", default=None)
    p.add_argument("--format", choices=("csv", "json", "table"),
                   default="table")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="checkpoint summary")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        threads = os.environ.get("SPECDEC_THREADS")
        if threads:
            import threadpoolctl
            with threadpoolctl.threadpool_limits(int(threads)):
                return args.func(args)
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - single line, machine parsable
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
