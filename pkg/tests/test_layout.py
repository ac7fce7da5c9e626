"""Packed layout and attention-mask correctness."""

import pytest
import torch

from blockbridge.errors import ConfigError
from blockbridge.layout import (
    AttentionMaskSpec,
    build_packed,
    build_packed_mask,
    build_two_branch,
    causal_mask,
    decode_step_mask,
    packed_attention_allowed,
    packed_token_count,
    two_branch_token_count,
    verify_no_leakage,
)


def _tiny(q_len=2, length=4):
    gen = torch.Generator().manual_seed(0)
    q = torch.randint(0, 10, (q_len,), generator=gen)
    x1 = torch.randint(0, 10, (length,), generator=gen)
    x_t = torch.randint(0, 11, (length,), generator=gen)
    return q, x1, x_t


def test_build_packed_layout():
    q, x1, x_t = _tiny()
    b = build_packed(q, x1, x_t, 2)
    assert b.tokens.shape[0] == 10
    assert torch.equal(b.tokens, torch.cat([q, x1, x_t]))
    # noisy tokens occupy indices 6..9 with positions equal to those of 2..5
    assert torch.equal(b.positions[6:10], b.positions[2:6])
    assert b.positions.tolist() == [0, 1, 2, 3, 4, 5, 2, 3, 4, 5]
    assert b.segments.tolist() == [0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
    assert b.block_index.tolist() == [0, 0, 1, 1]


def test_build_packed_block_extremes():
    q, x1, x_t = _tiny()
    whole = build_packed(q, x1, x_t, 4)
    assert whole.block_index.tolist() == [0, 0, 0, 0]
    single = build_packed(q, x1, x_t, 1)
    assert single.block_index.tolist() == [0, 1, 2, 3]


def test_build_packed_rejects_nondivisor():
    q, x1, x_t = _tiny()
    with pytest.raises(ConfigError):
        build_packed(q, x1, x_t, 3)


def test_mask_examples_from_rule():
    q, x1, x_t = _tiny()
    allowed = build_packed_mask(build_packed(q, x1, x_t, 2)).allowed
    assert sorted(allowed[8].nonzero().flatten().tolist()) == [0, 1, 2, 3, 8, 9]
    assert sorted(allowed[6].nonzero().flatten().tolist()) == [0, 1, 6, 7]
    assert sorted(allowed[4].nonzero().flatten().tolist()) == [0, 1, 2, 3, 4]


def test_mask_exhaustive_small_shapes():
    for q_len in range(0, 5):
        for length in range(1, 9):
            for block in (1, 2, 4, 8):
                if length % block:
                    continue
                q = torch.zeros(q_len, dtype=torch.long)
                x = torch.zeros(length, dtype=torch.long)
                batch = build_packed(q, x, x, block)
                assert verify_no_leakage(build_packed_mask(batch), batch) == []


def test_verify_no_leakage_detects_injected_faults():
    q, x1, x_t = _tiny()
    batch = build_packed(q, x1, x_t, 2)
    spec = build_packed_mask(batch)
    extra = spec.allowed.clone()
    extra[6, 4] = True  # noisy block 0 must not see clean block 1
    assert len(verify_no_leakage(AttentionMaskSpec(extra), batch)) == 1
    removed = spec.allowed.clone()
    removed[8, 0] = False
    assert len(verify_no_leakage(AttentionMaskSpec(removed), batch)) == 1


def test_predicate_matches_construction_independently():
    q, x1, x_t = _tiny(3, 8)
    batch = build_packed(q, x1, x_t, 4)
    allowed = build_packed_mask(batch).allowed
    total = batch.tokens.shape[0]
    for i in range(total):
        for j in range(total):
            assert bool(allowed[i, j]) == packed_attention_allowed(i, j, 3, 8, 4)


def test_two_branch_shapes():
    q, x1, x_t = _tiny()
    clean, branches = build_two_branch(q, x1, x_t, 4)
    assert len(branches) == 1  # B = L: [q, x1] and [q, x_t]
    assert torch.equal(branches[0].tokens, torch.cat([q, x_t]))
    clean, branches = build_two_branch(q, x1, x_t, 2)
    assert len(branches) == 2
    assert torch.equal(branches[0].tokens, torch.cat([q, x_t[:2]]))
    assert torch.equal(branches[1].tokens, torch.cat([q, x1[:2], x_t[2:4]]))


def test_two_branch_positions_match_packed():
    q, x1, x_t = _tiny(3, 8)
    packed = build_packed(q, x1, x_t, 2)
    _, branches = build_two_branch(q, x1, x_t, 2)
    for br in branches:
        noisy_positions = br.positions[br.noisy_slice]
        start = br.block * 2
        packed_noisy_positions = packed.positions[packed.noisy_slice][start : start + 2]
        assert torch.equal(noisy_positions, packed_noisy_positions)


def test_token_count_comparison():
    assert packed_token_count(32, 64) == 160
    assert two_branch_token_count(32, 64, 4) == (32 + 64) + sum(32 + 4 * i + 4 for i in range(16))
    for q_len in (1, 4, 32):
        for length in (8, 16, 64):
            for block in (1, 2, 4):
                if block >= length:
                    continue
                assert packed_token_count(q_len, length) < two_branch_token_count(
                    q_len, length, block
                )


def test_decode_step_mask():
    allowed = decode_step_mask(3, 2).allowed
    # prefix rows causal
    assert allowed[1].tolist() == [True, True, False, False, False]
    # block rows see everything (prefix plus the whole block)
    assert allowed[3].all() and allowed[4].all()


def test_causal_mask():
    allowed = causal_mask(4).allowed
    for i in range(4):
        for j in range(4):
            assert bool(allowed[i, j]) == (j <= i)
