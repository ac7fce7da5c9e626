"""Training losses: masked denoising, mixed-noise denoising, distillation KL,
and next-token cross-entropy.

All losses are means of per-example terms, so they are invariant under batch
permutation and duplication. Denoising targets are always the clean token at
the corrupted position itself; the next-token loss is the only place where
logits are read shifted by one slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, InputError
from .layout import AttentionMaskSpec
from .model import DenoiserNet, check_finite


@dataclass(frozen=True)
class KDConfig:
    """Distillation settings: softening temperature, the teacher's own block
    size (the anchor operates at block 4), and which kind of teacher to use."""

    tau: float = 1.0
    teacher_block: int = 4
    teacher_kind: str = "diffusion_anchor"  # or "autoregressive", or "none"

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"distillation temperature must be > 0, got {self.tau}")
        if self.teacher_kind not in ("diffusion_anchor", "autoregressive", "none"):
            raise ConfigError(f"unknown teacher kind {self.teacher_kind!r}")


def _as_batch(logits: torch.Tensor, *sets: torch.Tensor):
    if logits.dim() == 2:
        return logits.unsqueeze(0), [s.unsqueeze(0) for s in sets]
    return logits, list(sets)


def _selected_mean_nll(
    logits: torch.Tensor, selected: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """-(1/max(1,|sel|)) * sum_{i in sel} log p(target_i), averaged over rows."""
    logits, (selected, targets) = _as_batch(logits, selected, targets)
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    weights = selected.to(logp.dtype)
    counts = weights.sum(dim=1).clamp(min=1.0)
    per_row = -(picked * weights).sum(dim=1) / counts
    return per_row.mean()


def loss_mask(logits: torch.Tensor, masked: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Denoising loss over masked positions only."""
    return _selected_mean_nll(logits, masked, x1)


def loss_mix(logits: torch.Tensor, supervised: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Denoising loss over the full supervised set (masked plus uniformly
    corrupted visible positions)."""
    return _selected_mean_nll(logits, supervised, x1)


def loss_kd(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    supervised: torch.Tensor,
    tau: float = 1.0,
) -> torch.Tensor:
    """tau^2-scaled KL(teacher || student) of temperature-softened logits,
    averaged over supervised positions. Teacher logits are constants."""
    if tau <= 0:
        raise ConfigError(f"distillation temperature must be > 0, got {tau}")
    if student_logits.shape != teacher_logits.shape:
        raise InputError(
            f"student {tuple(student_logits.shape)} vs teacher "
            f"{tuple(teacher_logits.shape)} logit shape mismatch"
        )
    student_logits, (supervised,) = _as_batch(student_logits, supervised)
    teacher_logits = teacher_logits.detach()
    if teacher_logits.dim() == 2:
        teacher_logits = teacher_logits.unsqueeze(0)
    log_ps = torch.log_softmax(student_logits / tau, dim=-1)
    log_pt = torch.log_softmax(teacher_logits / tau, dim=-1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)
    weights = supervised.to(kl.dtype)
    counts = weights.sum(dim=1).clamp(min=1.0)
    per_row = (kl * weights).sum(dim=1) / counts
    return (tau * tau) * per_row.mean()


def loss_kd_ar_teacher(
    student_logits: torch.Tensor,
    ar_teacher_logits: torch.Tensor,
    supervised: torch.Tensor,
    tau: float = 1.0,
) -> torch.Tensor:
    """Distillation from a causal next-token teacher.

    Same KL form as loss_kd; the teacher logit for response position i must be
    taken at the causal slot predicting token i (see align_ar_teacher_logits),
    while the student predicts at the corrupted position itself. The systematic
    mismatch between the two readouts is kept on purpose.
    """
    return loss_kd(student_logits, ar_teacher_logits, supervised, tau)


def align_ar_teacher_logits(clean_logits: torch.Tensor, context_len: int, response_len: int):
    """Slice causal [context, clean] logits so slot i holds the prediction FOR
    response token i (shifted by one: slot context_len-1 predicts token 0)."""
    if clean_logits.dim() == 2:
        clean_logits = clean_logits.unsqueeze(0)
    return clean_logits[:, context_len - 1 : context_len + response_len - 1, :]


def loss_ar(logits: torch.Tensor, x1: torch.Tensor, context_len: int) -> torch.Tensor:
    """Mean next-token cross-entropy over response positions only, given
    logits from a causal forward over [context, response]."""
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    if x1.dim() == 1:
        x1 = x1.unsqueeze(0)
    response_len = x1.shape[1]
    shifted = align_ar_teacher_logits(logits, context_len, response_len)
    full = torch.ones_like(x1, dtype=torch.bool)
    return _selected_mean_nll(shifted, full, x1)


@dataclass
class ObjectiveBatch:
    """Everything needed to evaluate one named objective on one forward pass.

    tokens/positions/mask feed the student forward; x1 and the position sets
    select and target the loss. For the KD objectives teacher_logits are
    precomputed constants aligned to the response positions.
    """

    objective: str  # "mask" | "mix" | "kd" | "kd_ar" | "ar"
    tokens: torch.Tensor
    positions: torch.Tensor
    mask: AttentionMaskSpec
    x1: torch.Tensor
    context_len: int
    masked: torch.Tensor | None = None
    uniform: torch.Tensor | None = None
    teacher_logits: torch.Tensor | None = None
    tau: float = 1.0

    @property
    def supervised(self) -> torch.Tensor:
        return self.masked | self.uniform


def compute_loss(model: DenoiserNet, batch: ObjectiveBatch) -> torch.Tensor:
    logits = model(batch.tokens, batch.positions, batch.mask)
    response_len = batch.x1.shape[-1]
    if batch.objective == "ar":
        return loss_ar(logits, batch.x1, batch.context_len)
    resp_logits = logits[:, -response_len:, :]
    if batch.objective == "mask":
        return loss_mask(resp_logits, batch.masked, batch.x1)
    if batch.objective == "mix":
        return loss_mix(resp_logits, batch.supervised, batch.x1)
    if batch.objective == "kd":
        return loss_kd(resp_logits, batch.teacher_logits, batch.supervised, batch.tau)
    if batch.objective == "kd_ar":
        return loss_kd_ar_teacher(resp_logits, batch.teacher_logits, batch.supervised, batch.tau)
    raise ConfigError(f"unknown objective {batch.objective!r}")


def loss_and_grad(model: DenoiserNet, batch: ObjectiveBatch):
    """Loss plus gradients for every parameter (zeros where unused)."""
    loss = compute_loss(model, batch)
    check_finite(loss, "loss", objective=batch.objective)
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return loss.detach(), grads
