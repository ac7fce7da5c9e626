"""Command-line entry point.

Subcommands cover the full pipeline: data generation, causal pretraining, the
block-size bridge, standalone distillation, decoding, benchmarking, invariant
verification, and mask inspection. All experiments are driven by a JSON config
file (see config.py); every run writes its fully-resolved config next to its
outputs so it can be reproduced exactly.

Exit codes: 0 success, 1 verification failure, 2 configuration or usage error,
3 lineage error (missing/inconsistent checkpoint), 4 numeric failure.

The BLOCKBRIDGE_OUT_ROOT environment variable, when set, anchors relative
output directories.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import torch

from .bridge import (
    BridgeConfig,
    MetricsLogger,
    eval_decode_exact_match,
    eval_greedy_exact_match,
    run_bridge,
    train_ar,
    distill_stage,
    ExamplePool,
    EVAL_INDEX_BASE,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, load_run_config, resolved_config_doc
from .decode import DecodePolicy, generate, greedy_ar, summarize_traces, throughput_report
from .errors import ConfigError, InputError, LineageError, NumericError
from .layout import build_packed, build_packed_mask
from .noise import NoiseMode
from .objectives import KDConfig
from .task import TaskParams, exact_match_mean, gen_example
from .verify import SUITES, run_suites

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_LINEAGE = 3
EXIT_NUMERIC = 4


def resolve_out_dir(out_dir: str) -> Path:
    root = os.environ.get("BLOCKBRIDGE_OUT_ROOT")
    path = Path(out_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _load_config(args) -> RunConfig:
    if args.config:
        return load_run_config(args.config)
    return RunConfig()


def _write_resolved(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = resolved_config_doc(config)
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    task = config.task
    if args.num_pairs or args.num_queries or args.value_len or args.seed is not None:
        task = TaskParams(
            num_pairs=args.num_pairs or task.num_pairs,
            num_queries=args.num_queries or task.num_queries,
            value_len=args.value_len or task.value_len,
            seed=task.seed if args.seed is None else args.seed,
            vocab=task.vocab,
        )
    n = config.n_examples if args.n is None else args.n
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i in range(n):
            ex = gen_example(task, i)
            out.write(
                json.dumps({"index": i, "q": list(ex.q), "x1": list(ex.x1)}, sort_keys=True)
                + "\n"
            )
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_train_ar(args) -> int:
    config = _load_config(args)
    out_dir = resolve_out_dir(args.out_dir or config.out_dir)
    _write_resolved(config, out_dir)
    logger = MetricsLogger(out_dir / "metrics.jsonl", run_id=out_dir.name,
                           config_hash=config_hash(config))
    ckpt, record = train_ar(config.bridge, logger)
    save_checkpoint(ckpt, out_dir / "ar.ckpt")
    print(json.dumps({"checkpoint": str(out_dir / "ar.ckpt"),
                      "exact_match": record.exact_match, "steps": record.steps}))
    return EXIT_OK


def cmd_bridge(args) -> int:
    config = _load_config(args)
    bridge_cfg = config.bridge
    if args.noise:
        bridge_cfg = __import__("dataclasses").replace(bridge_cfg, noise_mode=NoiseMode(args.noise))
    out_dir = resolve_out_dir(args.out_dir or config.out_dir)
    _write_resolved(config, out_dir)
    logger = MetricsLogger(out_dir / "metrics.jsonl", run_id=out_dir.name,
                           config_hash=config_hash(config))
    stages = [int(s) for s in args.stages.split(",")] if args.stages else None
    result = run_bridge(
        bridge_cfg,
        out_dir=out_dir,
        resume=args.resume,
        strategy=args.strategy,
        distill_teacher=args.distill_teacher,
        stages=stages,
        logger=logger,
    )
    summary = [
        {"id": c.meta.checkpoint_id, "block_size": c.meta.block_size, "phase": c.meta.phase}
        for c in result.chain
    ]
    print(json.dumps({"out_dir": str(out_dir), "chain": summary}, indent=2))
    return EXIT_OK


def cmd_distill(args) -> int:
    config = _load_config(args)
    student = load_checkpoint(args.student)
    teacher = load_checkpoint(args.teacher)
    kd = KDConfig(
        tau=args.tau,
        teacher_block=args.teacher_block,
        teacher_kind=args.teacher_kind,
    )
    out_dir = resolve_out_dir(args.out_dir or config.out_dir)
    _write_resolved(config, out_dir)
    logger = MetricsLogger(out_dir / "metrics.jsonl", run_id=out_dir.name,
                           config_hash=config_hash(config))
    block = args.block_size or student.meta.block_size
    ckpt, record = distill_stage(
        student, teacher, block, args.steps, kd, config.bridge,
        checkpoint_id=f"b{block}_distilled", stage_index=student.meta.stage_index,
        logger=logger,
    )
    path = out_dir / f"{ckpt.meta.checkpoint_id}.ckpt"
    save_checkpoint(ckpt, path)
    print(json.dumps({"checkpoint": str(path), "exact_match": record.exact_match}))
    return EXIT_OK


def cmd_decode(args) -> int:
    config = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    task = config.task
    policy = DecodePolicy(
        block_size=args.block_size or (ckpt.meta.block_size or task.response_len),
        threshold=args.threshold,
        revision_enabled=not args.no_revision,
    )
    em, summary = eval_decode_exact_match(ckpt.model, task, args.n, policy)
    pool = ExamplePool(task, min(args.n, 3), base_index=EVAL_INDEX_BASE)
    preds, _ = generate(ckpt.model, pool.contexts, task.response_len, policy)
    print(json.dumps({
        "policy": policy.label(),
        "exact_match": em,
        **summary,
        "samples": [
            {"q": row_q.tolist(), "prediction": row_p.tolist(), "gold": row_g.tolist()}
            for row_q, row_p, row_g in zip(pool.contexts, preds, pool.responses)
        ],
    }, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _load_config(args)
    task = config.task
    out_dir = resolve_out_dir(args.out_dir or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(config, out_dir)
    n = args.n or config.bridge.eval_examples

    rows = []
    baseline = None
    if args.ar_checkpoint:
        ar_ckpt = load_checkpoint(args.ar_checkpoint)
        pool = ExamplePool(task, n, base_index=EVAL_INDEX_BASE)
        t0 = time.monotonic()
        preds, _ = greedy_ar(ar_ckpt.model, pool.contexts, task.response_len)
        wall = (time.monotonic() - t0) * 1000
        baseline = {
            "exact_match": exact_match_mean(preds.tolist(), pool.responses.tolist()),
            "wall_ms": wall,
            "block_size": 0,
            "eta": None,
        }

    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    for policy in config.policies:
        if ckpt is None:
            raise ConfigError("bench requires --checkpoint when policies are configured")
        pool = ExamplePool(task, n, base_index=EVAL_INDEX_BASE)
        t0 = time.monotonic()
        preds, traces = generate(ckpt.model, pool.contexts, task.response_len, policy)
        wall = (time.monotonic() - t0) * 1000
        summary = summarize_traces(traces)
        rows.append({
            "policy_id": f"{ckpt.meta.checkpoint_id}:{policy.label()}",
            "block_size": policy.block_size,
            "eta": policy.threshold,
            "exact_match": exact_match_mean(preds.tolist(), pool.responses.tolist()),
            "fwd_per_token": summary["fwd_per_token"],
            "speedup": summary["speedup"],
            "wall_ms": wall,
        })

    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["policy_id", "B", "eta", "exact_match", "fwd_per_token", "speedup", "wall_ms"])
        if baseline is not None:
            writer.writerow(["ar", 0, "", f"{baseline['exact_match']:.6f}", "1.0", "1.0",
                             f"{baseline['wall_ms']:.1f}"])
        for r in rows:
            writer.writerow([r["policy_id"], r["block_size"], r["eta"],
                             f"{r['exact_match']:.6f}", f"{r['fwd_per_token']:.6f}",
                             f"{r['speedup']:.6f}", f"{r['wall_ms']:.1f}"])
    report = throughput_report(rows, baseline) if baseline is not None else {"rows": rows, "curve": []}
    (out_dir / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({"csv": str(csv_path), "rows": len(rows) + (1 if baseline else 0)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    names = None if args.suite == "all" else [args.suite]
    if names and names[0] not in SUITES:
        print(f"unknown suite {args.suite!r}; available: {', '.join(SUITES)}, all",
              file=sys.stderr)
        return EXIT_CONFIG
    report = run_suites(names, inject_mask_fault=args.inject_mask_fault)
    print(json.dumps(report, indent=2, sort_keys=True, default=str))
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_verify_noise(args) -> int:
    report = run_suites(["noise"])
    print(json.dumps(report["suites"][0], indent=2, sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_dump_mask(args) -> int:
    q = torch.zeros(args.q_len, dtype=torch.long)
    x = torch.zeros(args.response_len, dtype=torch.long)
    batch = build_packed(q, x, x, args.block_size)
    allowed = build_packed_mask(batch).allowed
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for row in allowed.to(torch.int64).tolist():
            out.write(",".join(str(v) for v in row) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockbridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="emit task examples as JSONL")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-pairs", type=int)
    p.add_argument("--num-queries", type=int)
    p.add_argument("--value-len", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ar", help="pretrain the causal model")
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train_ar)

    p = sub.add_parser("bridge", help="run the block-size conversion pipeline")
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stages", help="comma-separated 1-based stage indices")
    p.add_argument("--noise", choices=[m.value for m in NoiseMode])
    p.add_argument("--distill-teacher", choices=["none", "anchor", "ar"], default="anchor")
    p.add_argument("--strategy", choices=["warm", "direct"], default="warm")
    p.set_defaults(func=cmd_bridge)

    p = sub.add_parser("distill", help="distill a student checkpoint from a frozen teacher")
    p.add_argument("--config")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--block-size", type=int)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--teacher-block", type=int, default=4)
    p.add_argument("--teacher-kind", choices=["diffusion_anchor", "autoregressive"],
                   default="diffusion_anchor")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("decode", help="decode held-out examples with one policy")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--block-size", type=int)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--no-revision", action="store_true")
    p.add_argument("--n", type=int, default=100)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="sweep decode policies and emit CSV + JSON")
    p.add_argument("--config")
    p.add_argument("--checkpoint", help="denoiser checkpoint for the policy grid")
    p.add_argument("--ar-checkpoint", help="causal checkpoint for the baseline row")
    p.add_argument("--n", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run invariant suites")
    p.add_argument("--suite", default="all")
    p.add_argument("--inject-mask-fault", action="store_true",
                   help="test hook: corrupt the mask before checking")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("verify-noise", help="print the corruption frequency report")
    p.set_defaults(func=cmd_verify_noise)

    p = sub.add_parser("dump-mask", help="write the packed attention mask as CSV")
    p.add_argument("--q-len", type=int, required=True)
    p.add_argument("--response-len", type=int, required=True)
    p.add_argument("--block-size", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_mask)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LineageError as e:
        print(f"lineage error: {e}", file=sys.stderr)
        return EXIT_LINEAGE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
