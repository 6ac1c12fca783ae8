"""Command-line surface: pretrain, finetune, score-viz, gradcheck, profile,
oracle-test.

Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from importlib import resources

import numpy as np

from .bytes_data import ByteSequence, embed, encode, load_corpus
from .config import RunConfig, format_config, load_config, resolve_for
from .errors import ConfigError, ShapeError
from .flops import benchmark_steps, count_flops
from .gradcheck import DEFAULT_TOLERANCE, REQUIRED_GROUPS, run_suite
from .model import ModelState, load_checkpoint, save_checkpoint
from .reference import run_oracle_suite
from .subword import gbst_forward, serialize_scores
from .tensor import no_grad
from .train import TrainingAborted, dump_batch, train_loop

HEAT_CHARS = " .:-=+*#%@"


def bundled_corpus_path() -> str:
    return str(resources.files("gbst").joinpath("data/toy_corpus.txt"))


def _load_run_config(args, command: str) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    cfg = resolve_for(command, cfg)
    if cfg.corpus is None:
        cfg = dataclasses.replace(cfg, corpus=bundled_corpus_path())
    return cfg


def _write_resolved(cfg: RunConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.resolved.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def _run_training(cfg: RunConfig, state: ModelState) -> int:
    if not os.path.exists(cfg.corpus):
        print(f"error: corpus file not found: {cfg.corpus}", file=sys.stderr)
        return 2
    _write_resolved(cfg)
    docs = load_corpus(cfg.corpus)
    train_cfg = cfg.train_config()
    state.run_config = dataclasses.asdict(cfg)
    log_path = os.path.join(cfg.out_dir, "metrics.log")
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.gbst")

    with open(log_path, "w", encoding="utf-8") as log:

        def emit(line: str) -> None:
            print(line)
            log.write(line + "\n")

        def checkpoint(st: ModelState) -> None:
            save_checkpoint(st, os.path.join(cfg.out_dir, f"checkpoint-{st.step}.gbst"))

        try:
            train_loop(state, docs, train_cfg, log_fn=emit, checkpoint_fn=checkpoint)
        except TrainingAborted as err:
            dump_path = os.path.join(cfg.out_dir, "nan_batch.txt")
            dump_batch(err.batch, dump_path)
            print(f"error: {err} (offending batch dumped to {dump_path})", file=sys.stderr)
            return 3
    save_checkpoint(state, ckpt_path)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args, "pretrain")
    state = ModelState(cfg.stack_config(), cfg.gbst_config(), seed=cfg.seed)
    return _run_training(cfg, state)


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args, "finetune")
    if cfg.checkpoint is None:
        print("error: finetune requires a checkpoint path in the config", file=sys.stderr)
        return 2
    if not os.path.exists(cfg.checkpoint):
        print(f"error: checkpoint not found: {cfg.checkpoint}", file=sys.stderr)
        return 2
    state = load_checkpoint(cfg.checkpoint)
    state.step = 0
    if cfg.freeze_gbst:
        state.set_gbst_frozen(True)
    return _run_training(cfg, state)


def _heatmap(weights: np.ndarray, labels: list[str]) -> str:
    # rows = candidate streams, columns = byte positions, shade by decile
    lines = []
    for c, label in enumerate(labels):
        cells = "".join(
            HEAT_CHARS[min(len(HEAT_CHARS) - 1, int(w * 10))] for w in weights[:, c]
        )
        lines.append(f"{label:>10} |{cells}|")
    return "\n".join(lines)


def cmd_score_viz(args) -> int:
    if not args.checkpoint or not args.text:
        print("error: score-viz needs --checkpoint and --text", file=sys.stderr)
        return 2
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 2
    state = load_checkpoint(args.checkpoint)
    if state.stack.frontend != "gbst":
        print("error: checkpoint has no gbst frontend to visualize", file=sys.stderr)
        return 2
    seq = encode(args.text)
    max_bytes = state.stack.max_positions * state.gbst.downsample_rate
    ids = seq.ids
    if len(ids) > max_bytes:
        print(f"warning: input truncated to {max_bytes} bytes", file=sys.stderr)
        ids = ids[:max_bytes]
    with no_grad():
        x = embed(ByteSequence(ids), state["embedding"])
        out = gbst_forward(x, state.gbst, state.gbst_param_view())
    tsv = serialize_scores(out.scores)
    sys.stdout.write(tsv)
    print(_heatmap(out.scores.mixing_weights().data, out.scores.labels))
    out_dir = args.out or "runs/latest"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "scores.tsv"), "w", encoding="utf-8") as fh:
        fh.write(tsv)
    return 0


def cmd_gradcheck(args) -> int:
    seeds = [args.seed if args.seed is not None else 0]
    report, ok = run_suite(seeds=seeds, corrupt_op=args.corrupt)
    offenders = []
    for group in sorted(report):
        err = report[group]
        status = "ok" if err < DEFAULT_TOLERANCE else "FAIL"
        print(f"{group}\t{err:.3e}\t{status}")
        if err >= DEFAULT_TOLERANCE:
            offenders.append(group)
    missing = [g for g in REQUIRED_GROUPS if g not in report]
    if missing:
        print(f"error: missing parameter groups: {missing}", file=sys.stderr)
        return 1
    if offenders:
        print(f"gradient check failed for: {', '.join(offenders)}", file=sys.stderr)
        return 1
    return 0


def cmd_profile(args) -> int:
    cfg = _load_run_config(args, "pretrain")
    seq_len = cfg.window_len
    rows = [("identity", None)] + [("gbst", rate) for rate in (1, 2, 3, 4)]
    if not args.no_bench:
        # prime allocator/BLAS so the first grid row is not penalized
        warm = dataclasses.replace(cfg, frontend="gbst", batch_size=1)
        benchmark_steps(
            ModelState(warm.stack_config(), warm.gbst_config(), seed=0),
            warm.train_config(),
            10,
            min(seq_len, 128),
        )
    print(f"{'frontend':>10} {'d_s':>4} {'params':>10} {'flops':>14} {'steps/s':>9}")
    for frontend, rate in rows:
        row_cfg = dataclasses.replace(
            cfg,
            frontend=frontend,
            downsample_rate=rate if rate is not None else cfg.downsample_rate,
        )
        stack, gbst = row_cfg.stack_config(), row_cfg.gbst_config()
        report = count_flops(stack, gbst, seq_len)
        speed = ""
        if not args.no_bench:
            state = ModelState(stack, gbst, seed=cfg.seed)
            bench = benchmark_steps(state, row_cfg.train_config(), args.bench_steps, seq_len)
            report.steps_per_second = bench.steps_per_second
            report.peak_alloc_bytes = bench.peak_alloc_bytes
            speed = f"{bench.steps_per_second:9.3f}"
        label = frontend if rate is None else f"{frontend}"
        print(f"{label:>10} {rate if rate is not None else '-':>4} "
              f"{report.params:>10} {report.flops_forward:>14} {speed:>9}")
        sys.stdout.write(report.machine_lines())
    return 0


def cmd_oracle_test(args) -> int:
    worst, failures = run_oracle_suite(n_instances=args.instances, seed=args.seed or 0)
    print(f"instances={args.instances} worst_abs_diff={worst:.3e} failures={failures}")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gbst",
        description="byte-level encoder-decoder with soft subword tokenization",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common]).set_defaults(fn=cmd_pretrain)
    sub.add_parser("finetune", parents=[common]).set_defaults(fn=cmd_finetune)

    viz = sub.add_parser("score-viz", parents=[common])
    viz.add_argument("--checkpoint", help="model checkpoint to load")
    viz.add_argument("--text", help="UTF-8 text to visualize")
    viz.set_defaults(fn=cmd_score_viz)

    gc = sub.add_parser("gradcheck", parents=[common])
    gc.add_argument("--corrupt", help="negative control: corrupt this op's backward rule")
    gc.set_defaults(fn=cmd_gradcheck)

    prof = sub.add_parser("profile", parents=[common])
    prof.add_argument("--no-bench", action="store_true", help="analytic counts only")
    prof.add_argument("--bench-steps", type=int, default=10,
                      help="timed steps per row (needs exclusive CPU access)")
    prof.set_defaults(fn=cmd_profile)

    ot = sub.add_parser("oracle-test", parents=[common])
    ot.add_argument("--instances", type=int, default=1000)
    ot.set_defaults(fn=cmd_oracle_test)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingAborted as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
