"""Noise scheduler: closed-form coefficients and kernel marginals."""

import math

import pytest
import torch

from blockbridge.errors import InputError
from blockbridge.noise import NoiseMode, corrupt, corrupt_batch_with, kappa, sample_t
from blockbridge.task import Vocab


def test_kappa_endpoints():
    assert kappa(0.0).as_tuple() == pytest.approx((0.0, 0.0, 1.0), abs=1e-12)
    assert kappa(1.0).as_tuple() == pytest.approx((1.0, 0.0, 0.0), abs=1e-12)


def test_kappa_midpoint_closed_form():
    k = kappa(0.5)
    r = math.sqrt(2) / 2
    assert k.k1 == pytest.approx(1 - r, abs=1e-12)
    assert k.k2 == pytest.approx(math.sqrt(2) - 1, abs=1e-12)
    assert k.k3 == pytest.approx(1 - r, abs=1e-12)


def test_kappa_simplex_grid_and_random():
    gen = torch.Generator().manual_seed(0)
    ts = [i / 999 for i in range(1000)]
    ts += torch.rand(10_000, generator=gen, dtype=torch.float64).tolist()
    for mode in NoiseMode:
        for t in ts:
            k = kappa(t, mode)
            assert abs(k.k1 + k.k2 + k.k3 - 1.0) <= 1e-12
            assert min(k.as_tuple()) >= -1e-12


def test_kappa_domain_error():
    with pytest.raises(InputError):
        kappa(-0.01)
    with pytest.raises(InputError):
        kappa(1.01)


def test_single_noise_modes_degenerate_schedules():
    assert kappa(0.3, NoiseMode.MASK_ONLY).as_tuple() == pytest.approx((0.3, 0.0, 0.7))
    assert kappa(0.3, NoiseMode.UNIFORM_ONLY).as_tuple() == pytest.approx((0.3, 0.7, 0.0))


@pytest.fixture
def vocab():
    return Vocab()


def _clean(vocab, length=64, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randint(3, vocab.size, (length,), generator=gen)


def test_corrupt_t1_identity(vocab):
    x1 = _clean(vocab)
    s = corrupt(x1, 1.0, vocab, rng_seed=11)
    assert torch.equal(s.x_t, x1)
    assert not s.masked.any() and not s.uniform.any()
    assert not s.supervised.any()


def test_corrupt_t0_all_masked(vocab):
    x1 = _clean(vocab)
    s = corrupt(x1, 0.0, vocab, rng_seed=11)
    assert (s.x_t == vocab.mask_id).all()
    assert s.masked.all() and not s.uniform.any()


def test_corrupt_deterministic_and_placement(vocab):
    x1 = _clean(vocab)
    a = corrupt(x1, 0.4, vocab, rng_seed=5)
    b = corrupt(x1, 0.4, vocab, rng_seed=5)
    assert torch.equal(a.x_t, b.x_t)
    assert not (a.masked & a.uniform).any()
    assert (a.x_t[a.masked] == vocab.mask_id).all()
    assert (a.x_t[a.uniform] != vocab.mask_id).all()
    untouched = ~a.supervised
    assert torch.equal(a.x_t[untouched], x1[untouched])


def test_corrupt_rejects_mask_in_input(vocab):
    x1 = _clean(vocab)
    x1[3] = vocab.mask_id
    with pytest.raises(InputError):
        corrupt(x1, 0.5, vocab, rng_seed=0)


def test_mode_specific_sets(vocab):
    x1 = _clean(vocab)
    for seed in range(20):
        s = corrupt(x1, 0.5, vocab, seed, NoiseMode.MASK_ONLY)
        assert not s.uniform.any()
        s = corrupt(x1, 0.5, vocab, seed, NoiseMode.UNIFORM_ONLY)
        assert not s.masked.any()


@pytest.mark.parametrize("t", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_kernel_marginals_within_3_sigma(vocab, t):
    length = 64
    rows = 200_000 // length
    n = rows * length
    gen = torch.Generator().manual_seed(int(t * 1000) + 17)
    x1 = torch.randint(3, vocab.size, (rows, length), generator=gen)
    x_t, masked, uniform = corrupt_batch_with(
        gen, x1, torch.full((rows,), t, dtype=torch.float64), vocab
    )
    k = kappa(t)
    observed = {
        "clean": 1.0 - float(masked.sum() + uniform.sum()) / n,
        "uniform": float(uniform.sum()) / n,
        "mask": float(masked.sum()) / n,
    }
    for freq, p in zip(observed.values(), k.as_tuple()):
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(freq - p) <= 3 * sigma + 1e-12, (t, observed, k.as_tuple())


def test_uniform_draw_may_equal_clean_token_and_stays_supervised(vocab):
    # force frequent uniform corruption; some draws will coincide with x1
    x1 = torch.full((64,), 10, dtype=torch.long)
    hits = 0
    for seed in range(200):
        s = corrupt(x1, 0.5, vocab, seed, NoiseMode.UNIFORM_ONLY)
        same = s.uniform & (s.x_t == x1)
        hits += int(same.sum())
        # positions whose uniform draw equals the clean token remain in U_t
        assert (s.supervised == (s.masked | s.uniform)).all()
    assert hits > 0


def test_sample_t_deterministic_and_uniform():
    assert sample_t(123) == sample_t(123)
    gen = torch.Generator().manual_seed(0)
    draws = torch.rand(100_000, generator=gen, dtype=torch.float64)
    assert abs(float(draws.mean()) - 0.5) < 0.005
    assert float(draws.min()) >= 0.0 and float(draws.max()) <= 1.0
