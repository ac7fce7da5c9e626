"""Mixed-noise corruption of clean responses.

For a corruption level t in [0, 1] each response position independently stays
clean, is resampled uniformly over the ordinary vocabulary (never the mask id),
or is replaced by the mask id, with probabilities (k1, k2, k3). The supervised
set S_t is the union of masked positions M_t and uniformly corrupted visible
positions U_t; a uniform draw that happens to coincide with the clean token
still counts as corrupted (it stays in U_t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch

from .errors import InputError
from .task import Vocab


class NoiseMode(str, Enum):
    MASK_ONLY = "mask"
    UNIFORM_ONLY = "uniform"
    MIXTURE = "mixture"


@dataclass(frozen=True)
class Kappa:
    """Branch probabilities (clean, uniform, mask); always on the simplex."""

    k1: float
    k2: float
    k3: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.k1, self.k2, self.k3)


def kappa(t: float, mode: NoiseMode = NoiseMode.MIXTURE) -> Kappa:
    """Branch probabilities at corruption level t.

    Mixture uses the trigonometric schedule
      k1 = 1 - cos(pi*t/2),  k2 = cos(pi*t/2) + sin(pi*t/2) - 1,  k3 = 1 - sin(pi*t/2);
    the single-noise modes degenerate to linear schedules in t with the unused
    branch pinned to zero.
    """
    if not 0.0 <= t <= 1.0:
        raise InputError(f"corruption level t must be in [0, 1], got {t}")
    if mode == NoiseMode.MIXTURE:
        c = math.cos(math.pi * t / 2)
        s = math.sin(math.pi * t / 2)
        return Kappa(1.0 - c, c + s - 1.0, 1.0 - s)
    if mode == NoiseMode.MASK_ONLY:
        return Kappa(t, 0.0, 1.0 - t)
    if mode == NoiseMode.UNIFORM_ONLY:
        return Kappa(t, 1.0 - t, 0.0)
    raise InputError(f"unknown noise mode {mode!r}")


@dataclass
class CorruptionSample:
    """One corrupted response: tokens plus the position sets driving the loss."""

    t: float
    x_t: torch.Tensor  # long [L]
    masked: torch.Tensor  # bool [L], M_t
    uniform: torch.Tensor  # bool [L], U_t

    @property
    def supervised(self) -> torch.Tensor:
        """S_t = M_t | U_t."""
        return self.masked | self.uniform


def corrupt_batch_with(
    gen: torch.Generator,
    x1: torch.Tensor,
    t: torch.Tensor,
    vocab: Vocab,
    mode: NoiseMode = NoiseMode.MIXTURE,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Corrupt a batch of clean responses x1 [N, L] at per-row levels t [N].

    Returns (x_t, masked, uniform). Draw order is fixed (branch draw then
    uniform replacement draw, both for every position) so the generator state
    advances identically regardless of which branches fire.
    """
    if x1.dim() != 2:
        raise InputError(f"x1 must be [N, L], got shape {tuple(x1.shape)}")
    if (x1 == vocab.mask_id).any():
        raise InputError("clean response x1 must not contain the mask id")
    n, length = x1.shape
    ks = [kappa(float(tv), mode) for tv in t.tolist()]
    k1 = torch.tensor([k.k1 for k in ks], dtype=torch.float64).unsqueeze(1)
    k2 = torch.tensor([k.k2 for k in ks], dtype=torch.float64).unsqueeze(1)

    u = torch.rand((n, length), generator=gen, dtype=torch.float64)
    replacement = torch.randint(0, vocab.size, (n, length), generator=gen)

    clean = u < k1
    uniform = (~clean) & (u < k1 + k2)
    masked = ~(clean | uniform)

    x_t = x1.clone()
    x_t[uniform] = replacement[uniform]
    x_t[masked] = vocab.mask_id
    return x_t, masked, uniform


def corrupt(
    x1: torch.Tensor,
    t: float,
    vocab: Vocab,
    rng_seed: int,
    mode: NoiseMode = NoiseMode.MIXTURE,
) -> CorruptionSample:
    """Corrupt a single clean response [L] deterministically for rng_seed."""
    if x1.dim() != 1:
        raise InputError(f"x1 must be a 1-D token sequence, got shape {tuple(x1.shape)}")
    gen = torch.Generator()
    gen.manual_seed(rng_seed & 0x7FFFFFFFFFFFFFFF)
    x_t, masked, uniform = corrupt_batch_with(
        gen, x1.unsqueeze(0), torch.tensor([t], dtype=torch.float64), vocab, mode
    )
    return CorruptionSample(t=t, x_t=x_t[0], masked=masked[0], uniform=uniform[0])


def sample_t(rng_seed: int) -> float:
    """Uniform corruption level on [0, 1), deterministic per seed."""
    gen = torch.Generator()
    gen.manual_seed(rng_seed & 0x7FFFFFFFFFFFFFFF)
    return float(torch.rand((), generator=gen, dtype=torch.float64))


def sample_t_batch_with(gen: torch.Generator, n: int) -> torch.Tensor:
    """n uniform corruption levels drawn from an existing generator stream."""
    return torch.rand((n,), generator=gen, dtype=torch.float64)
