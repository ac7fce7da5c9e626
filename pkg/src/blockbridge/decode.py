"""Inference: semi-autoregressive block decoding with confidence thresholds.

Each block starts fully masked. A forward pass over [context, block] (block
attends to the context, all finalized blocks, and itself) yields per-slot
distributions; masked slots whose top probability reaches the threshold are
committed to their argmax, and already-visible slots may be overwritten only by
a strictly higher-confidence prediction when revision is enabled. Blocks are
finalized left to right and become clean context for later blocks.

Decoding is deterministic: argmax with ties broken toward the lowest token id,
no sampling. Throughput is counted in model invocations, never FLOPs; greedy
autoregressive decoding is exactly one invocation per generated token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ConfigError
from .layout import causal_mask, decode_step_mask
from .model import DenoiserNet


@dataclass(frozen=True)
class DecodePolicy:
    block_size: int
    threshold: float = 0.9
    max_steps_per_block: int | None = None  # defaults to 2 * block_size
    revision_enabled: bool = True

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ConfigError(f"block size must be >= 1, got {self.block_size}")
        # thresholds above 1 are allowed: they mean "never materialize early"
        if self.threshold < 0:
            raise ConfigError(f"threshold must be >= 0, got {self.threshold}")
        if self.max_steps_per_block is not None and self.max_steps_per_block < 1:
            raise ConfigError("max_steps_per_block must be >= 1")

    @property
    def max_steps(self) -> int:
        return self.max_steps_per_block if self.max_steps_per_block else 2 * self.block_size

    def label(self) -> str:
        return (
            f"b{self.block_size}_eta{self.threshold:g}"
            f"{'' if self.revision_enabled else '_norev'}"
        )


@dataclass
class TraceStep:
    block: int
    materialized: list = field(default_factory=list)  # (pos, token, conf)
    revised: list = field(default_factory=list)  # (pos, old_tok, new_tok, old_conf, new_conf)
    forced: list = field(default_factory=list)  # (pos, token, conf) filled at the step cap


@dataclass
class DecodeTrace:
    steps: list = field(default_factory=list)
    forward_passes: int = 0
    generated_tokens: int = 0


def decode_block(
    model: DenoiserNet,
    context: torch.Tensor,
    policy: DecodePolicy,
    rng_seed: int | None = None,
    block_label: int = 0,
):
    """Decode one block for a batch of contexts.

    Returns (block tokens [N, B], per-sequence trace fragments, per-sequence
    forward-pass counts). rng_seed is accepted for interface stability but
    unused: decoding is pure argmax.
    """
    del rng_seed
    if context.dim() == 1:
        context = context.unsqueeze(0)
    n, ctx_len = context.shape
    b = policy.block_size
    mask_id = model.config.vocab_total - 1
    mask_spec = decode_step_mask(ctx_len, b)
    positions = torch.arange(ctx_len + b)

    block = torch.full((n, b), mask_id, dtype=torch.long)
    visible = torch.zeros(n, b, dtype=torch.bool)
    conf = torch.zeros(n, b, dtype=torch.float64)
    last_pred = torch.zeros(n, b, dtype=torch.long)
    last_conf = torch.zeros(n, b, dtype=torch.float64)
    passes = torch.zeros(n, dtype=torch.long)
    active = torch.ones(n, dtype=torch.bool)
    fragments: list[list[TraceStep]] = [[] for _ in range(n)]

    for _ in range(policy.max_steps):
        rows = active.nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            break
        tokens = torch.cat([context[rows], block[rows]], dim=1)
        with torch.no_grad():
            logits = model(tokens, positions.expand(rows.numel(), -1), mask_spec)
        probs = torch.softmax(logits[:, ctx_len:, :].double(), dim=-1)
        pmax, amax = probs.max(dim=-1)  # ties resolve to the lowest token id
        last_pred[rows] = amax
        last_conf[rows] = pmax

        sub_visible = visible[rows]
        materialize = ~sub_visible & (pmax >= policy.threshold)
        if policy.revision_enabled:
            better = sub_visible & (pmax > conf[rows])
            revise = better & (amax != block[rows])
            confirm = better & (amax == block[rows])
        else:
            revise = torch.zeros_like(materialize)
            confirm = torch.zeros_like(materialize)

        for local, row in enumerate(rows.tolist()):
            step = TraceStep(block=block_label)
            for pos in materialize[local].nonzero(as_tuple=True)[0].tolist():
                step.materialized.append(
                    (pos, int(amax[local, pos]), float(pmax[local, pos]))
                )
            for pos in revise[local].nonzero(as_tuple=True)[0].tolist():
                step.revised.append(
                    (
                        pos,
                        int(block[row, pos]),
                        int(amax[local, pos]),
                        float(conf[row, pos]),
                        float(pmax[local, pos]),
                    )
                )
            fragments[row].append(step)

        changed = materialize | revise
        new_block = block[rows].clone()
        new_conf = conf[rows].clone()
        update = changed | confirm
        new_block[changed] = amax[changed]
        new_conf[update] = pmax[update]
        block[rows] = new_block
        conf[rows] = new_conf
        visible[rows] = sub_visible | materialize
        passes[rows] += 1

        done = visible[rows].all(dim=1)
        if policy.revision_enabled:
            done = done & ~changed.any(dim=1)
        still_active = active.clone()
        still_active[rows] = ~done
        active = still_active

    # step cap reached: commit remaining masked slots to the last argmax seen
    for row in active.nonzero(as_tuple=True)[0].tolist():
        remaining = (~visible[row]).nonzero(as_tuple=True)[0].tolist()
        if remaining and not fragments[row]:
            raise ConfigError("max_steps_per_block of 0 cannot decode")  # unreachable
        last_step = fragments[row][-1]
        for pos in remaining:
            block[row, pos] = last_pred[row, pos]
            conf[row, pos] = last_conf[row, pos]
            visible[row, pos] = True
            last_step.forced.append(
                (pos, int(last_pred[row, pos]), float(last_conf[row, pos]))
            )

    return block, fragments, passes


def generate(
    model: DenoiserNet, context: torch.Tensor, response_len: int, policy: DecodePolicy
):
    """Decode a full response of response_len tokens, block by block.

    Accepts a single context [q] or a batch [N, q]; returns (responses, traces)
    with shapes matching the input batching.
    """
    single = context.dim() == 1
    ctx = context.unsqueeze(0) if single else context
    if response_len % policy.block_size != 0:
        raise ConfigError(
            f"block size {policy.block_size} must divide response length {response_len}"
        )
    n = ctx.shape[0]
    traces = [DecodeTrace() for _ in range(n)]
    for b in range(response_len // policy.block_size):
        block, fragments, passes = decode_block(model, ctx, policy, block_label=b)
        ctx = torch.cat([ctx, block], dim=1)
        for row in range(n):
            traces[row].steps.extend(fragments[row])
            traces[row].forward_passes += int(passes[row])
    for trace in traces:
        trace.generated_tokens = response_len
    responses = ctx[:, -response_len:]
    if single:
        return responses[0], traces[0]
    return responses, traces


def greedy_ar(model: DenoiserNet, context: torch.Tensor, response_len: int):
    """Greedy next-token decoding under the causal mask; exactly one model
    invocation per generated token (the prefix is recomputed each step)."""
    single = context.dim() == 1
    ctx = context.unsqueeze(0) if single else context
    for _ in range(response_len):
        t = ctx.shape[1]
        with torch.no_grad():
            logits = model(ctx, torch.arange(t).expand(ctx.shape[0], -1), causal_mask(t))
        nxt = logits[:, -1, :].argmax(dim=-1, keepdim=True)
        ctx = torch.cat([ctx, nxt], dim=1)
    responses = ctx[:, -response_len:]
    if single:
        return responses[0], response_len
    return responses, response_len


def summarize_traces(traces: list[DecodeTrace]) -> dict:
    """Mean model invocations per sequence/token and the speedup relative to
    one invocation per token (greedy AR's exact cost)."""
    if not traces:
        return {"mean_forward_passes": 0.0, "fwd_per_token": 0.0, "speedup": 0.0}
    mean_passes = sum(t.forward_passes for t in traces) / len(traces)
    tokens = traces[0].generated_tokens
    fwd_per_token = mean_passes / tokens if tokens else 0.0
    return {
        "mean_forward_passes": mean_passes,
        "fwd_per_token": fwd_per_token,
        "speedup": 1.0 / fwd_per_token if fwd_per_token > 0 else 0.0,
    }


def throughput_report(policy_rows: list[dict], baseline: dict) -> dict:
    """Combine per-policy measurements with the greedy AR baseline.

    Each row must carry policy metadata plus exact_match and the summary from
    summarize_traces; the baseline row is pinned to speedup 1.0 by definition.
    """
    rows = [dict(baseline, policy_id="ar", speedup=1.0, fwd_per_token=1.0)]
    rows.extend(policy_rows)
    curve = [
        {"eta": r.get("eta"), "speedup": r["speedup"], "exact_match": r["exact_match"]}
        for r in policy_rows
    ]
    return {"rows": rows, "curve": curve}
