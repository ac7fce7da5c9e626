"""Synthetic keyed lookup-and-copy task.

Each example is a (q, x1) pair over a small closed vocabulary:

  q  = [BOS] <haystack> [SEP] query_1 .. query_N
  x1 = values of query_1 [SEP] values of query_2 [SEP] ... values of query_N [SEP]

The haystack is a fixed-width window holding `num_pairs` segments of
`key v_1 .. v_V`, written in random order at random offsets with PAD filler in
between, so token positions carry no information about which table token a
response position should copy: the model has to find keys and values by
content. Keys and value tokens are all distinct within an example, which makes
match-and-copy attention unambiguous. Queries are a subset of the keys in
random order, and the response is a pure function of q, so decoding is exactly
scorable.

Structural token ids (inside the ordinary range): BOS=0, SEP=1, PAD=2 (the
haystack filler). Keys and values are drawn from the remaining ordinary ids
[3, size). The mask id is size itself and never appears in generated data.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, TaskParseError
from .rng import SplitMix64, derive_seed

BOS = 0
SEP = 1
PAD = 2
_NUM_STRUCTURAL = 3

TokenSeq = tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    """Closed vocabulary: `size` ordinary ids plus one reserved mask id."""

    size: int = 256

    def __post_init__(self) -> None:
        if self.size < _NUM_STRUCTURAL + 2:
            raise ConfigError(f"vocab size {self.size} too small for structural ids plus content")

    @property
    def mask_id(self) -> int:
        return self.size

    @property
    def total(self) -> int:
        """Number of distinct ids including the mask."""
        return self.size + 1

    @property
    def content_ids(self) -> range:
        """Ordinary ids available for keys and values."""
        return range(_NUM_STRUCTURAL, self.size)


@dataclass(frozen=True)
class TaskParams:
    """Shape of the lookup task.

    The response length L = num_queries * (value_len + 1) must be divisible by
    every block size used downstream; the defaults give L = 64 so the whole
    (4, 8, 16, 32) schedule divides it evenly.
    """

    num_pairs: int = 2
    num_queries: int = 2
    value_len: int = 31
    haystack_slack: int = 32
    seed: int = 0
    vocab: Vocab = Vocab()

    def __post_init__(self) -> None:
        if self.num_pairs < 1 or self.num_queries < 1 or self.value_len < 1:
            raise ConfigError("num_pairs, num_queries and value_len must all be >= 1")
        if self.haystack_slack < 0:
            raise ConfigError("haystack_slack must be >= 0")
        if self.num_queries > self.num_pairs:
            raise ConfigError(
                f"num_queries ({self.num_queries}) may not exceed num_pairs ({self.num_pairs})"
            )
        distinct_needed = self.num_pairs * (1 + self.value_len)
        if distinct_needed > len(self.vocab.content_ids):
            raise ConfigError(
                f"table needs {distinct_needed} distinct content ids but the vocabulary "
                f"only offers {len(self.vocab.content_ids)}"
            )

    @property
    def response_len(self) -> int:
        """L: one value plus one separator per query."""
        return self.num_queries * (self.value_len + 1)

    @property
    def haystack_len(self) -> int:
        return self.num_pairs * (1 + self.value_len) + self.haystack_slack

    @property
    def context_len(self) -> int:
        return 1 + self.haystack_len + 1 + self.num_queries


@dataclass(frozen=True)
class Example:
    q: TokenSeq
    x1: TokenSeq
    index: int


def gen_example(params: TaskParams, index: int) -> Example:
    """Generate example `index` deterministically from (params.seed, index)."""
    if index < 0:
        raise ConfigError(f"index must be >= 0, got {index}")
    rng = SplitMix64(derive_seed(params.seed, "example", index))
    content = params.vocab.content_ids
    lo, n = content.start, len(content)

    # one distinct draw covers keys and every value token, so nothing in the
    # table repeats and copying is unambiguous
    np, vl = params.num_pairs, params.value_len
    ids = [lo + v for v in rng.sample_distinct(n, np * (1 + vl))]
    keys = ids[:np]
    values = [ids[np + p * vl : np + (p + 1) * vl] for p in range(np)]
    query_order = rng.sample_distinct(np, params.num_queries)

    # haystack: segments in random order at random offsets, PAD in the gaps
    segment_order = rng.sample_distinct(np, np)
    cuts = sorted(rng.next_below(params.haystack_slack + 1) for _ in range(np))
    gaps = [cuts[0]] + [b - a for a, b in zip(cuts, cuts[1:])]
    gaps.append(params.haystack_slack - cuts[-1])
    haystack: list[int] = []
    for gap, p in zip(gaps, segment_order):
        haystack.extend([PAD] * gap)
        haystack.append(keys[p])
        haystack.extend(values[p])
    haystack.extend([PAD] * gaps[-1])
    assert len(haystack) == params.haystack_len

    q: list[int] = [BOS]
    q.extend(haystack)
    q.append(SEP)
    q.extend(keys[i] for i in query_order)

    x1: list[int] = []
    for i in query_order:
        x1.extend(values[i])
        x1.append(SEP)

    assert len(x1) == params.response_len
    return Example(q=tuple(q), x1=tuple(x1), index=index)


def gold_answer(q: TokenSeq, params: TaskParams) -> TokenSeq:
    """Parse q under the task grammar and return the exact response.

    Raises TaskParseError naming the offending offset when q is malformed.
    """
    expected = params.context_len
    if len(q) != expected:
        raise TaskParseError(f"context length {len(q)} != expected {expected} (offset {len(q)})")
    if q[0] != BOS:
        raise TaskParseError(f"expected BOS at offset 0, found id {q[0]}")

    content = params.vocab.content_ids
    table: dict[int, TokenSeq] = {}
    pos = 1
    end = 1 + params.haystack_len
    while pos < end:
        if q[pos] == PAD:
            pos += 1
            continue
        key = q[pos]
        if key not in content:
            raise TaskParseError(f"expected key id or PAD at offset {pos}, found id {key}")
        if key in table:
            raise TaskParseError(f"duplicate key id {key} at offset {pos}")
        if pos + params.value_len >= end:
            raise TaskParseError(f"segment at offset {pos} overruns the haystack")
        vals = q[pos + 1 : pos + 1 + params.value_len]
        for j, v in enumerate(vals):
            if v not in content:
                raise TaskParseError(f"expected value id at offset {pos + 1 + j}, found id {v}")
        table[key] = tuple(vals)
        pos += 1 + params.value_len
    if len(table) != params.num_pairs:
        raise TaskParseError(
            f"haystack holds {len(table)} segments, expected {params.num_pairs} (offset {end})"
        )

    if q[end] != SEP:
        raise TaskParseError(f"expected SEP at offset {end}, found id {q[end]}")
    pos = end + 1

    out: list[int] = []
    for _ in range(params.num_queries):
        key = q[pos]
        if key not in table:
            raise TaskParseError(f"query key id {key} at offset {pos} is not in the table")
        out.extend(table[key])
        out.append(SEP)
        pos += 1
    return tuple(out)


def exact_match(pred, gold) -> float:
    """1.0 if the sequences are identical, else 0.0."""
    pred = tuple(int(t) for t in pred)
    gold = tuple(int(t) for t in gold)
    return 1.0 if pred == gold else 0.0


def exact_match_mean(preds, golds) -> float:
    """Mean exact match over paired sequences."""
    preds = list(preds)
    golds = list(golds)
    if len(preds) != len(golds):
        raise ConfigError(f"batch size mismatch: {len(preds)} preds vs {len(golds)} golds")
    if not preds:
        return 0.0
    return sum(exact_match(p, g) for p, g in zip(preds, golds)) / len(preds)
