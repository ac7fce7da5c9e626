"""Task generator: determinism, invertibility, scoring."""

import json
from pathlib import Path

import pytest

from blockbridge.errors import ConfigError, TaskParseError
from blockbridge.task import (
    BOS,
    SEP,
    Example,
    TaskParams,
    Vocab,
    exact_match,
    exact_match_mean,
    gen_example,
    gold_answer,
)

GOLDEN = Path(__file__).parent / "data" / "golden_seed7_index3.json"


def test_gen_example_deterministic():
    p = TaskParams(seed=0)
    assert gen_example(p, 0) == gen_example(p, 0)


def test_gen_example_varies_with_index_and_seed():
    p = TaskParams(seed=0)
    assert gen_example(p, 0) != gen_example(p, 1)
    assert gen_example(p, 0) != gen_example(TaskParams(seed=1), 0)


def test_minimal_response_length():
    p = TaskParams(num_pairs=1, num_queries=1, value_len=1)
    ex = gen_example(p, 0)
    assert len(ex.x1) == 2  # one value token plus one separator


def test_golden_example_pinned():
    doc = json.loads(GOLDEN.read_text())
    ex = gen_example(TaskParams(seed=doc["seed"]), doc["index"])
    assert list(ex.q) == doc["q"]
    assert list(ex.x1) == doc["x1"]


def test_response_length_formula():
    for p in [TaskParams(), TaskParams(num_pairs=4, num_queries=2, value_len=3)]:
        for i in range(20):
            assert len(gen_example(p, i).x1) == p.response_len


def test_default_length_divisible_by_schedule():
    p = TaskParams()
    assert p.response_len == 64
    for b in (4, 8, 16, 32):
        assert p.response_len % b == 0


def test_keys_distinct_within_example():
    p = TaskParams()
    for i in range(50):
        ex = gen_example(p, i)
        keys = [ex.q[1 + j * (1 + p.value_len)] for j in range(p.num_pairs)]
        assert len(set(keys)) == p.num_pairs


def test_invalid_params_rejected():
    with pytest.raises(ConfigError):
        TaskParams(num_pairs=2, num_queries=3)
    with pytest.raises(ConfigError):
        TaskParams(value_len=0)
    with pytest.raises(ConfigError):
        gen_example(TaskParams(), -1)


def test_gold_answer_round_trip_bulk():
    p = TaskParams(seed=3)
    for i in range(10_000):
        ex = gen_example(p, i)
        assert gold_answer(ex.q, p) == ex.x1


def test_gold_answer_hand_written():
    # 2 pairs, 1 query, value_len 1, no filler: table {10: (20,), 11: (21,)}
    p = TaskParams(num_pairs=2, num_queries=1, value_len=1, haystack_slack=0, seed=0)
    q = (BOS, 10, 20, 11, 21, SEP, 11)
    assert gold_answer(q, p) == (21, SEP)
    # with filler the segments may sit anywhere inside the window
    p2 = TaskParams(num_pairs=2, num_queries=1, value_len=1, haystack_slack=2, seed=0)
    q2 = (BOS, 2, 11, 21, 2, 10, 20, SEP, 11)
    assert gold_answer(q2, p2) == (21, SEP)


def test_gold_answer_unknown_query_key():
    p = TaskParams(num_pairs=2, num_queries=1, value_len=1, haystack_slack=0, seed=0)
    q = (BOS, 10, 20, 11, 21, SEP, 12)
    with pytest.raises(TaskParseError) as err:
        gold_answer(q, p)
    assert "offset 6" in str(err.value)


def test_gold_answer_malformed_structure():
    p = TaskParams(num_pairs=2, num_queries=1, value_len=1, haystack_slack=0, seed=0)
    with pytest.raises(TaskParseError):
        gold_answer((5, 10, 20, 11, 21, SEP, 11), p)  # missing BOS
    with pytest.raises(TaskParseError):
        gold_answer((BOS, 10, 20, 11, 21, 0, 11), p)  # missing SEP
    with pytest.raises(TaskParseError):
        gold_answer((BOS, 10, 20), p)  # wrong length
    with pytest.raises(TaskParseError):
        gold_answer((BOS, 10, 20, 10, 21, SEP, 10), p)  # duplicate key
    with pytest.raises(TaskParseError):
        gold_answer((BOS, 2, 10, 20, 11, 21, SEP, 11), p)  # segment overruns window


def test_mask_id_never_generated():
    p = TaskParams()
    mask_id = p.vocab.mask_id
    for i in range(200):
        ex = gen_example(p, i)
        assert mask_id not in ex.q
        assert mask_id not in ex.x1
        assert all(0 <= t <= p.vocab.size for t in ex.q + ex.x1)


def test_exact_match():
    s = (1, 2, 3)
    assert exact_match(s, s) == 1.0
    assert exact_match(s, (1, 2, 4)) == 0.0
    assert exact_match(s, (1, 2)) == 0.0
    assert exact_match_mean([s, s], [s, (1, 2, 4)]) == 0.5


def test_vocab_layout():
    v = Vocab()
    assert v.mask_id == 256
    assert v.total == 257
    assert v.mask_id not in v.content_ids
    assert BOS not in v.content_ids and SEP not in v.content_ids


def test_table_tokens_all_distinct():
    from blockbridge.task import PAD

    p = TaskParams()
    span = p.num_pairs * (1 + p.value_len)
    for i in range(50):
        window = gen_example(p, i).q[1 : 1 + p.haystack_len]
        table = [t for t in window if t != PAD]
        assert len(table) == span
        assert len(set(table)) == span


def test_haystack_offsets_vary():
    from blockbridge.task import PAD

    p = TaskParams()
    first_content = set()
    for i in range(100):
        window = gen_example(p, i).q[1 : 1 + p.haystack_len]
        first_content.add(next(j for j, t in enumerate(window) if t != PAD))
    assert len(first_content) > 10  # needle placement is genuinely random


def test_distinctness_requires_large_enough_vocab():
    with pytest.raises(ConfigError):
        TaskParams(num_pairs=8, num_queries=8, value_len=7, vocab=Vocab(64))
