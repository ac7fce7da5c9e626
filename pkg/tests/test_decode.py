"""Decoding: pass accounting, thresholds, revision semantics, determinism."""

import dataclasses

import pytest
import torch

from blockbridge.decode import DecodePolicy, decode_block, generate, greedy_ar, summarize_traces
from blockbridge.errors import ConfigError
from blockbridge.model import NetConfig, init_net

TINY = NetConfig(layers=2, model_dim=16, heads=2, ff_dim=32, vocab_total=17, max_positions=64)


@pytest.fixture(scope="module")
def model():
    return init_net(TINY)


def _ctx(n=3, length=5, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randint(0, 16, (n, length), generator=gen)


def test_threshold_zero_without_revision_is_one_pass_per_block(model):
    policy = DecodePolicy(block_size=2, threshold=0.0, revision_enabled=False)
    _, traces = generate(model, _ctx(), 8, policy)
    for trace in traces:
        assert trace.forward_passes == 4  # one pass per block, four blocks
        assert trace.generated_tokens == 8


def test_impossible_threshold_hits_cap_then_fills(model):
    policy = DecodePolicy(block_size=4, threshold=1.5, max_steps_per_block=3)
    responses, traces = generate(model, _ctx(), 8, policy)
    mask_id = TINY.vocab_total - 1
    assert not (responses == mask_id).any()
    for trace in traces:
        assert trace.forward_passes == 6  # cap of 3 per block, two blocks
        forced = sum(len(s.forced) for s in trace.steps)
        assert forced == 8  # every position force-filled


def test_trace_totals_and_materialize_once(model):
    policy = DecodePolicy(block_size=4, threshold=0.5)
    _, traces = generate(model, _ctx(), 8, policy)
    for trace in traces:
        assert trace.forward_passes >= 2  # at least L / B
        seen = []
        for step in trace.steps:
            seen.extend((step.block, pos) for pos, _, _ in step.materialized)
            seen.extend((step.block, pos) for pos, _, _ in step.forced)
        assert sorted(seen) == [(b, p) for b in range(2) for p in range(4)]


def test_revision_disabled_tokens_never_change(model):
    policy = DecodePolicy(block_size=4, threshold=0.0, revision_enabled=False,
                          max_steps_per_block=6)
    _, traces = generate(model, _ctx(), 8, policy)
    for trace in traces:
        assert all(not step.revised for step in trace.steps)


def test_stored_confidence_nondecreasing(model):
    policy = DecodePolicy(block_size=4, threshold=0.3, revision_enabled=True)
    _, traces = generate(model, _ctx(n=5), 8, policy)
    revisions = 0
    for trace in traces:
        committed = {}
        for step in trace.steps:
            for pos, _, conf in step.materialized:
                committed[(step.block, pos)] = conf
            for pos, _, _, old_conf, new_conf in step.revised:
                revisions += 1
                assert new_conf > old_conf
                assert committed[(step.block, pos)] == pytest.approx(old_conf)
                committed[(step.block, pos)] = new_conf


def test_decode_deterministic(model):
    policy = DecodePolicy(block_size=2, threshold=0.7)
    ctx = _ctx()
    r1, t1 = generate(model, ctx, 8, policy)
    r2, t2 = generate(model, ctx, 8, policy)
    assert torch.equal(r1, r2)
    assert [t.forward_passes for t in t1] == [t.forward_passes for t in t2]


def test_decode_block_batch_matches_single(model):
    ctx = _ctx(n=4, length=6, seed=2)
    policy = DecodePolicy(block_size=4, threshold=0.6)
    blocks, _, passes = decode_block(model, ctx, policy)
    for row in range(4):
        single, _, single_passes = decode_block(model, ctx[row], policy)
        assert torch.equal(blocks[row], single[0])
        assert int(passes[row]) == int(single_passes[0])


def test_greedy_ar_pass_count_and_determinism(model):
    ctx = _ctx()
    resp1, n_passes = greedy_ar(model, ctx, 8)
    assert n_passes == 8
    resp2, _ = greedy_ar(model, ctx, 8)
    assert torch.equal(resp1, resp2)
    single, n_single = greedy_ar(model, ctx[0], 8)
    assert n_single == 8
    assert torch.equal(single, resp1[0])


def test_generate_requires_divisible_block(model):
    with pytest.raises(ConfigError):
        generate(model, _ctx(), 7, DecodePolicy(block_size=2))


def test_policy_validation():
    with pytest.raises(ConfigError):
        DecodePolicy(block_size=0)
    with pytest.raises(ConfigError):
        DecodePolicy(block_size=2, threshold=-0.1)
    assert DecodePolicy(block_size=2).max_steps == 4


def test_summarize_traces_speedup_arithmetic(model):
    policy = DecodePolicy(block_size=4, threshold=0.0, revision_enabled=False)
    _, traces = generate(model, _ctx(), 8, policy)
    summary = summarize_traces(traces)
    assert summary["mean_forward_passes"] == 2.0
    assert summary["fwd_per_token"] == 0.25
    assert summary["speedup"] == 4.0
