"""Machine-checkable invariant suites.

Each suite returns a JSON-friendly report with a boolean verdict; the CLI
`verify` subcommand runs them and exits nonzero on any failure. The suites are
deliberately independent re-derivations (closed-form predicates, Monte-Carlo
frequencies, finite differences, a duplicated-context reference layout, and a
greedy decoder) rather than reuses of the code paths they check.
"""

from __future__ import annotations

import dataclasses
import math

import torch

from .bridge import ExamplePool, sample_batch
from .decode import DecodePolicy, generate, greedy_ar
from .layout import (
    AttentionMaskSpec,
    build_packed,
    build_packed_mask,
    build_two_branch,
    causal_mask,
    verify_no_leakage,
)
from .model import NetConfig, OptimizerSchedule, TrainState, init_net, optimizer_step
from .noise import NoiseMode, corrupt_batch_with, kappa
from .objectives import ObjectiveBatch, loss_and_grad, loss_ar, loss_mix
from .rng import derive_seed
from .task import TaskParams, Vocab

EVAL_BASE_FOR_EQUIV = 20_000_000  # equivalence-check contexts, disjoint from all pools


def noise_frequency_suite(
    n_samples: int = 200_000,
    t_values: tuple = (0.1, 0.3, 0.5, 0.7, 0.9),
    mode: NoiseMode = NoiseMode.MIXTURE,
    seed: int = 2024,
    sigmas: float = 3.0,
) -> dict:
    """Empirical branch frequencies vs closed-form probabilities, per level."""
    vocab = Vocab()
    length = 64
    rows = n_samples // length
    checks = []
    passed = True
    for t in t_values:
        gen = torch.Generator()
        gen.manual_seed(derive_seed(seed, "freq", int(t * 1000)) & 0x7FFFFFFFFFFFFFFF)
        x1 = torch.randint(3, vocab.size, (rows, length), generator=gen)
        x_t, masked, uniform = corrupt_batch_with(
            gen, x1, torch.full((rows,), t, dtype=torch.float64), vocab, mode
        )
        n = rows * length
        k = kappa(t, mode)
        observed = {
            "clean": 1.0 - (masked.sum().item() + uniform.sum().item()) / n,
            "uniform": uniform.sum().item() / n,
            "mask": masked.sum().item() / n,
        }
        entry = {"t": t, "n": n, "observed": observed, "expected": k.as_tuple(), "ok": True}
        for freq, p in zip((observed["clean"], observed["uniform"], observed["mask"]), k.as_tuple()):
            sigma = math.sqrt(max(p * (1 - p), 1e-300) / n)
            if abs(freq - p) > sigmas * sigma + 1e-12:
                entry["ok"] = False
        checks.append(entry)
        passed = passed and entry["ok"]
    return {"name": "noise", "passed": passed, "checks": checks}


def kappa_simplex_suite(grid_points: int = 1000, random_points: int = 10_000, seed: int = 7) -> dict:
    """Simplex invariant on a grid plus random levels, all three modes."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    ts = [i / (grid_points - 1) for i in range(grid_points)]
    ts += torch.rand(random_points, generator=gen, dtype=torch.float64).tolist()
    worst_sum = 0.0
    worst_neg = 0.0
    for mode in NoiseMode:
        for t in ts:
            k = kappa(t, mode)
            worst_sum = max(worst_sum, abs(k.k1 + k.k2 + k.k3 - 1.0))
            worst_neg = min(worst_neg, k.k1, k.k2, k.k3)
    endpoints = {
        "t0": kappa(0.0).as_tuple(),
        "t1": kappa(1.0).as_tuple(),
    }
    passed = (
        worst_sum <= 1e-12
        and worst_neg >= -1e-12
        and max(abs(a - b) for a, b in zip(endpoints["t0"], (0.0, 0.0, 1.0))) <= 1e-12
        and max(abs(a - b) for a, b in zip(endpoints["t1"], (1.0, 0.0, 0.0))) <= 1e-12
    )
    return {
        "name": "kappa",
        "passed": passed,
        "worst_sum_err": worst_sum,
        "worst_negative": worst_neg,
        "endpoints": endpoints,
    }


def mask_enumeration_suite(inject_fault: bool = False) -> dict:
    """Exhaustive packed-mask check on all small shapes."""
    total_checked = 0
    violations = 0
    first = None
    for q_len in range(0, 5):
        for length in range(1, 9):
            for block in (1, 2, 4, 8):
                if length % block != 0:
                    continue
                q = torch.zeros(q_len, dtype=torch.long)
                x = torch.zeros(length, dtype=torch.long)
                batch = build_packed(q, x, x, block)
                spec = build_packed_mask(batch)
                if inject_fault:
                    flipped = spec.allowed.clone()
                    flipped[-1, 0] = ~flipped[-1, 0]
                    spec = AttentionMaskSpec(flipped)
                found = verify_no_leakage(spec, batch)
                total_checked += (q_len + 2 * length) ** 2
                violations += len(found)
                if found and first is None:
                    first = {"q_len": q_len, "length": length, "block": block, "pair": found[0][:2]}
    return {
        "name": "mask",
        "passed": violations == 0,
        "pairs_checked": total_checked,
        "violations": violations,
        "first_violation": first,
    }


def packed_equivalence_suite(
    instances: int = 50, tolerance: float = 1e-10, seed: int = 99, precision: str = "f64"
) -> dict:
    """Packed noisy-block logits vs the duplicated-context reference layout."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    worst = 0.0
    for i in range(instances):
        q_len = int(torch.randint(1, 7, (1,), generator=gen))
        length = int(torch.randint(1, 5, (1,), generator=gen)) * 2
        divisors = [b for b in (1, 2, 4, 8) if length % b == 0]
        block = divisors[int(torch.randint(0, len(divisors), (1,), generator=gen))]
        vocab_total = 17
        config = NetConfig(
            layers=2, model_dim=16, heads=2, ff_dim=32, vocab_total=vocab_total,
            max_positions=64, init_seed=1000 + i, precision=precision,
        )
        model = init_net(config)
        q = torch.randint(0, vocab_total - 1, (q_len,), generator=gen)
        x1 = torch.randint(0, vocab_total - 1, (length,), generator=gen)
        x_t = torch.randint(0, vocab_total, (length,), generator=gen)
        batch = build_packed(q, x1, x_t, block)
        mask = build_packed_mask(batch)
        with torch.no_grad():
            packed_logits = model(batch.tokens, batch.positions, mask)[0]
        clean, branches = build_two_branch(q, x1, x_t, block)
        for branch in branches:
            with torch.no_grad():
                ref = model(branch.tokens, branch.positions, branch.mask)[0]
            ref_block = ref[branch.noisy_slice]
            start = q_len + length + branch.block * block
            got = packed_logits[start : start + block]
            worst = max(worst, float((got - ref_block).abs().max()))
        with torch.no_grad():
            ref_clean = model(clean.tokens, clean.positions, clean.mask)[0]
        worst = max(worst, float((packed_logits[: q_len + length] - ref_clean).abs().max()))
    return {
        "name": "packed",
        "passed": worst <= tolerance,
        "instances": instances,
        "max_abs_diff": worst,
        "tolerance": tolerance,
    }


def _finite_difference_grad(model, batch, param, flat_index, step=1e-5):
    from .objectives import compute_loss

    with torch.no_grad():
        flat = param.view(-1)
        original = float(flat[flat_index])
        flat[flat_index] = original + step
        up = float(compute_loss(model, batch))
        flat[flat_index] = original - step
        down = float(compute_loss(model, batch))
        flat[flat_index] = original
    return (up - down) / (2 * step)


def gradient_check_suite(
    coords_per_objective: int = 200, step: float = 1e-5, tolerance: float = 1e-4, seed: int = 5
) -> dict:
    """Autograd vs central finite differences in f64 for every objective."""
    task = TaskParams(num_pairs=3, num_queries=2, value_len=1, haystack_slack=4, seed=11)
    vocab = task.vocab
    config = NetConfig(
        layers=2, model_dim=16, heads=2, ff_dim=32, vocab_total=vocab.total,
        max_positions=64, init_seed=seed, precision="f64",
    )
    gen = torch.Generator()
    gen.manual_seed(seed)
    pool = ExamplePool(task, 4)
    q, x1 = pool.contexts, pool.responses
    length, q_len = task.response_len, task.context_len
    t = torch.rand(q.shape[0], generator=gen, dtype=torch.float64) * 0.8 + 0.1
    x_t, masked, uniform = corrupt_batch_with(gen, x1, t, vocab, NoiseMode.MIXTURE)
    packed = build_packed(q[0], x1[0], x_t[0], 2)
    packed_mask = build_packed_mask(packed)
    packed_tokens = torch.cat([q, x1, x_t], dim=1)
    packed_positions = packed.positions.expand(q.shape[0], -1)

    teacher = init_net(dataclasses.replace(config, init_seed=seed + 1))
    with torch.no_grad():
        teacher_logits = teacher(packed_tokens, packed_positions, packed_mask)[:, -length:, :]

    batches = {
        "mask": ObjectiveBatch(
            "mask", packed_tokens, packed_positions, packed_mask, x1, q_len,
            masked=masked, uniform=torch.zeros_like(uniform),
        ),
        "mix": ObjectiveBatch(
            "mix", packed_tokens, packed_positions, packed_mask, x1, q_len,
            masked=masked, uniform=uniform,
        ),
        "kd": ObjectiveBatch(
            "kd", packed_tokens, packed_positions, packed_mask, x1, q_len,
            masked=masked, uniform=uniform, teacher_logits=teacher_logits, tau=1.5,
        ),
        "ar": ObjectiveBatch(
            "ar", torch.cat([q, x1], dim=1),
            torch.arange(q_len + length).expand(q.shape[0], -1),
            causal_mask(q_len + length), x1, q_len,
        ),
    }

    results = {}
    passed = True
    for name, batch in batches.items():
        model = init_net(config)
        _, grads = loss_and_grad(model, batch)
        params = list(model.parameters())
        sizes = [p.numel() for p in params]
        total = sum(sizes)
        coord_gen = torch.Generator()
        coord_gen.manual_seed(derive_seed(seed, "coords", name) & 0x7FFFFFFFFFFFFFFF)
        worst = 0.0
        for flat in torch.randint(0, total, (coords_per_objective,), generator=coord_gen).tolist():
            p_idx = 0
            while flat >= sizes[p_idx]:
                flat -= sizes[p_idx]
                p_idx += 1
            analytic = float(grads[p_idx].view(-1)[flat])
            numeric = _finite_difference_grad(model, batch, params[p_idx], flat, step)
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
        results[name] = worst
        passed = passed and worst < tolerance
    return {
        "name": "grad",
        "passed": passed,
        "max_relative_error": results,
        "tolerance": tolerance,
        "coords_per_objective": coords_per_objective,
    }


def train_tiny_dual_model(seed: int = 123, steps: int = 2600):
    """Train a small model jointly on next-token prediction and single-token
    block denoising until both decode paths are exact on the task.

    Used as the oracle model for the AR-equivalence check: a converged model is
    the 'autoregressive-equivalent' denoiser on which blockwise decoding at
    block size 1 must reproduce greedy AR decoding token for token.
    """
    task = TaskParams(num_pairs=1, num_queries=1, value_len=15, haystack_slack=8, seed=seed)
    vocab = task.vocab
    config = NetConfig(
        layers=2, model_dim=32, heads=2, ff_dim=64, vocab_total=vocab.total,
        max_positions=64, init_seed=seed,
    )
    model = init_net(config)
    q_len, length = task.context_len, task.response_len
    data_gen = torch.Generator()
    data_gen.manual_seed(derive_seed(seed, "dual-data") & 0x7FFFFFFFFFFFFFFF)
    noise_gen = torch.Generator()
    noise_gen.manual_seed(derive_seed(seed, "dual-noise") & 0x7FFFFFFFFFFFFFFF)
    ar_mask = causal_mask(q_len + length)
    ar_positions = torch.arange(q_len + length)
    probe = sample_batch(task, data_gen, 1, 4)
    packed = build_packed(probe[0][0], probe[1][0], probe[1][0], 1)
    packed_mask = build_packed_mask(packed)

    schedule = OptimizerSchedule(
        peak_lr=2e-3, warmup_steps=max(1, steps // 10), total_steps=steps,
        final_lr=1e-4, weight_decay=0.0,
    )
    state = TrainState.create(model, schedule)
    for _ in range(steps):
        q, x1 = sample_batch(task, data_gen, 32, 1 << 30)
        t = torch.rand(q.shape[0], generator=noise_gen, dtype=torch.float64)
        x_t, masked, uniform = corrupt_batch_with(noise_gen, x1, t, vocab, NoiseMode.MIXTURE)
        ar_logits = model(torch.cat([q, x1], 1), ar_positions.expand(q.shape[0], -1), ar_mask)
        pk_tokens = torch.cat([q, x1, x_t], 1)
        pk_logits = model(pk_tokens, packed.positions.expand(q.shape[0], -1), packed_mask)
        loss = loss_ar(ar_logits, x1, q_len) + loss_mix(
            pk_logits[:, -length:, :], masked | uniform, x1
        )
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer_step(state, model)
    return model, task


def ar_equivalence_suite(contexts: int = 100, seed: int = 123) -> dict:
    """Block size 1, threshold 0, single-step decoding vs greedy AR."""
    model, task = train_tiny_dual_model(seed=seed)
    pool = ExamplePool(task, contexts, base_index=EVAL_BASE_FOR_EQUIV)
    policy = DecodePolicy(
        block_size=1, threshold=0.0, max_steps_per_block=1, revision_enabled=False
    )
    block_out, _ = generate(model, pool.contexts, task.response_len, policy)
    ar_out, _ = greedy_ar(model, pool.contexts, task.response_len)
    mismatches = int((block_out != ar_out).any(dim=1).sum())
    gold_match = float((block_out == pool.responses).all(dim=1).double().mean())
    return {
        "name": "ar-equiv",
        "passed": mismatches == 0,
        "contexts": contexts,
        "mismatched_contexts": mismatches,
        "block_decode_gold_match": gold_match,
    }


SUITES = {
    "kappa": kappa_simplex_suite,
    "noise": noise_frequency_suite,
    "mask": mask_enumeration_suite,
    "packed": packed_equivalence_suite,
    "grad": gradient_check_suite,
    "ar-equiv": ar_equivalence_suite,
}


def run_suites(names: list[str] | None = None, inject_mask_fault: bool = False) -> dict:
    chosen = names or list(SUITES)
    reports = []
    for name in chosen:
        if name not in SUITES:
            raise KeyError(name)
        if name == "mask":
            reports.append(mask_enumeration_suite(inject_fault=inject_mask_fault))
        else:
            reports.append(SUITES[name]())
    return {"suites": reports, "passed": all(r["passed"] for r in reports)}
