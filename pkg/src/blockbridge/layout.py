"""Packed [context, clean, noisy] training layout and its block attention mask.

The context is stored once, followed by the clean response and the corrupted
response. Noisy tokens reuse the position ids of their clean counterparts so
that denoising is position-aligned. The attention rule: context and clean
tokens are causal among themselves; a noisy token in block b sees the whole
context, the clean tokens of strictly earlier blocks, and its own noisy block
(bidirectionally) - nothing else.

A two-branch reference layout (context duplicated per block) is provided as an
equivalence oracle for the packed forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, InputError

SEG_CONTEXT = 0
SEG_CLEAN = 1
SEG_NOISY = 2


@dataclass
class AttentionMaskSpec:
    """Boolean relation allowed[query, key] over a token sequence."""

    allowed: torch.Tensor  # bool [T, T]


@dataclass
class PackedBatch:
    """One packed sequence: tokens, duplicated positions, segment labels."""

    tokens: torch.Tensor  # long [q + 2L]
    positions: torch.Tensor  # long [q + 2L]
    segments: torch.Tensor  # long [q + 2L]
    context_len: int
    response_len: int
    block_size: int

    @property
    def block_index(self) -> torch.Tensor:
        """Block number of each response token, floor(j / B)."""
        return torch.arange(self.response_len) // self.block_size

    @property
    def noisy_slice(self) -> slice:
        return slice(self.context_len + self.response_len, self.context_len + 2 * self.response_len)


def causal_mask(length: int) -> AttentionMaskSpec:
    """Standard causal mask: each token attends to itself and everything before."""
    return AttentionMaskSpec(torch.ones(length, length, dtype=torch.bool).tril())


def build_packed(
    q: torch.Tensor, x1: torch.Tensor, x_t: torch.Tensor, block_size: int
) -> PackedBatch:
    """Assemble the packed sequence [q, x1, x_t] with duplicated positions."""
    if x1.shape != x_t.shape or x1.dim() != 1:
        raise InputError(
            f"x1 and x_t must be 1-D and equal length, got {tuple(x1.shape)} vs {tuple(x_t.shape)}"
        )
    length = x1.shape[0]
    if block_size < 1 or length % block_size != 0:
        raise ConfigError(f"block size {block_size} must divide response length {length}")
    q_len = q.shape[0]
    tokens = torch.cat([q, x1, x_t])
    resp_pos = torch.arange(q_len, q_len + length)
    positions = torch.cat([torch.arange(q_len), resp_pos, resp_pos])
    segments = torch.cat(
        [
            torch.full((q_len,), SEG_CONTEXT),
            torch.full((length,), SEG_CLEAN),
            torch.full((length,), SEG_NOISY),
        ]
    )
    return PackedBatch(
        tokens=tokens,
        positions=positions,
        segments=segments,
        context_len=q_len,
        response_len=length,
        block_size=block_size,
    )


def packed_attention_allowed(
    query_index: int, key_index: int, context_len: int, response_len: int, block_size: int
) -> bool:
    """Closed-form attention predicate for the packed layout.

    Kept as straight index arithmetic, independent of the tensor construction
    below, so the two can be checked against each other exhaustively.
    """
    clean_end = context_len + response_len
    total = context_len + 2 * response_len
    if not (0 <= query_index < total and 0 <= key_index < total):
        return False
    if query_index < clean_end:
        return key_index <= query_index
    block = (query_index - clean_end) // block_size
    if key_index < context_len:
        return True
    if key_index < clean_end:
        return key_index - context_len < block * block_size
    return (key_index - clean_end) // block_size == block


def build_packed_mask(batch: PackedBatch) -> AttentionMaskSpec:
    """Attention mask for a packed batch (vectorized construction)."""
    q_len, length, b = batch.context_len, batch.response_len, batch.block_size
    clean_end = q_len + length
    total = q_len + 2 * length
    allowed = torch.zeros(total, total, dtype=torch.bool)
    allowed[:clean_end, :clean_end] = torch.ones(clean_end, clean_end, dtype=torch.bool).tril()

    blocks = torch.arange(length) // b  # block of each noisy query
    allowed[clean_end:, :q_len] = True
    clean_j = torch.arange(length)
    # noisy query in block b_q sees clean token j iff j < b_q * B
    allowed[clean_end:, q_len:clean_end] = clean_j.unsqueeze(0) < (blocks * b).unsqueeze(1)
    allowed[clean_end:, clean_end:] = blocks.unsqueeze(0) == blocks.unsqueeze(1)
    return AttentionMaskSpec(allowed)


def decode_step_mask(context_len: int, block_size: int) -> AttentionMaskSpec:
    """Inference mask for [context, current block]: prefix causal, block sees
    the whole prefix plus itself bidirectionally."""
    total = context_len + block_size
    allowed = torch.ones(total, total, dtype=torch.bool).tril()
    allowed[context_len:, :] = True
    return AttentionMaskSpec(allowed)


@dataclass
class BranchLayout:
    """One reference sequence: tokens, positions, mask, and where the noisy
    block (if any) sits."""

    tokens: torch.Tensor
    positions: torch.Tensor
    mask: AttentionMaskSpec
    noisy_slice: slice | None
    block: int | None


def build_two_branch(
    q: torch.Tensor, x1: torch.Tensor, x_t: torch.Tensor, block_size: int
) -> tuple[BranchLayout, list[BranchLayout]]:
    """Reference layout that duplicates the context: one causal [q, x1] branch
    plus, per block b, a [q, clean prefix, noisy block b] branch."""
    if x1.shape != x_t.shape or x1.dim() != 1:
        raise InputError("x1 and x_t must be 1-D and equal length")
    length = x1.shape[0]
    if block_size < 1 or length % block_size != 0:
        raise ConfigError(f"block size {block_size} must divide response length {length}")
    q_len = q.shape[0]

    clean_tokens = torch.cat([q, x1])
    clean = BranchLayout(
        tokens=clean_tokens,
        positions=torch.arange(q_len + length),
        mask=causal_mask(q_len + length),
        noisy_slice=None,
        block=None,
    )

    branches: list[BranchLayout] = []
    for b in range(length // block_size):
        prefix = b * block_size
        tokens = torch.cat([q, x1[:prefix], x_t[prefix : prefix + block_size]])
        total = q_len + prefix + block_size
        branches.append(
            BranchLayout(
                tokens=tokens,
                positions=torch.arange(total),
                mask=decode_step_mask(q_len + prefix, block_size),
                noisy_slice=slice(q_len + prefix, total),
                block=b,
            )
        )
    return clean, branches


def packed_token_count(context_len: int, response_len: int) -> int:
    return context_len + 2 * response_len


def two_branch_token_count(context_len: int, response_len: int, block_size: int) -> int:
    n_blocks = response_len // block_size
    noisy = sum(context_len + b * block_size + block_size for b in range(n_blocks))
    return (context_len + response_len) + noisy


def verify_no_leakage(spec: AttentionMaskSpec, batch: PackedBatch) -> list[tuple[int, int, bool]]:
    """Exhaustively compare a mask against the closed-form predicate.

    Returns the list of (query, key, expected_allowed) violations; empty means
    the mask realizes the attention rule exactly.
    """
    q_len, length, b = batch.context_len, batch.response_len, batch.block_size
    total = q_len + 2 * length
    if spec.allowed.shape != (total, total):
        raise InputError(
            f"mask shape {tuple(spec.allowed.shape)} does not match packed length {total}"
        )
    violations = []
    got = spec.allowed
    for i in range(total):
        for j in range(total):
            expected = packed_attention_allowed(i, j, q_len, length, b)
            if bool(got[i, j]) != expected:
                violations.append((i, j, expected))
    return violations
