"""Tiny decoder-only transformer with pluggable boolean attention masks.

The same backbone serves the causal pretraining checkpoint, the block-denoising
stages, and every distilled student. Design choices are driven by testability:
learned absolute position embeddings (required for the duplicated-position
packed layout), pre-norm blocks, exact (erf) GELU, no dropout, and an optional
f64 mode so gradients can be checked against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, InputError, NumericError
from .layout import AttentionMaskSpec


@dataclass(frozen=True)
class NetConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 256
    vocab_total: int = 257
    max_positions: int = 256
    init_seed: int = 0
    precision: str = "f32"

    def __post_init__(self) -> None:
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "f64" else torch.float32


def expected_param_count(config: NetConfig) -> int:
    """Closed-form parameter count of the architecture below."""
    d, ff, v, p = config.model_dim, config.ff_dim, config.vocab_total, config.max_positions
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d)
    return v * d + p * d + config.layers * per_layer + 2 * d + (d * v + v)


class _Block(nn.Module):
    def __init__(self, config: NetConfig) -> None:
        super().__init__()
        d = config.model_dim
        self.heads = config.heads
        self.head_dim = d // config.heads
        self.ln_attn = nn.LayerNorm(d)
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)
        self.ln_ff = nn.LayerNorm(d)
        self.w1 = nn.Linear(d, config.ff_dim)
        self.w2 = nn.Linear(config.ff_dim, d)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        n, t, d = x.shape
        h = self.ln_attn(x)
        q = self.wq(h).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(h).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        v = self.wv(h).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) * (self.head_dim**-0.5)
        scores = scores.masked_fill(~allowed, float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        x = x + self.wo(ctx.transpose(1, 2).reshape(n, t, d))
        h = self.ln_ff(x)
        return x + self.w2(nn.functional.gelu(self.w1(h)))


class DenoiserNet(nn.Module):
    """Mask-aware transformer; `init_net` is the canonical constructor."""

    def __init__(self, config: NetConfig) -> None:
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_total, config.model_dim)
        self.pos_emb = nn.Embedding(config.max_positions, config.model_dim)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.layers))
        self.ln_out = nn.LayerNorm(config.model_dim)
        self.head = nn.Linear(config.model_dim, config.vocab_total)

    def forward(
        self,
        tokens: torch.Tensor,
        positions: torch.Tensor,
        mask: AttentionMaskSpec | torch.Tensor,
    ) -> torch.Tensor:
        """Logits [N, T, vocab_total]; attention is exactly zero outside the mask."""
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if positions.dim() == 1:
            positions = positions.unsqueeze(0)
        if tokens.shape != positions.shape:
            raise InputError(
                f"tokens {tuple(tokens.shape)} and positions {tuple(positions.shape)} differ"
            )
        allowed = mask.allowed if isinstance(mask, AttentionMaskSpec) else mask
        t = tokens.shape[1]
        if allowed.shape[-2:] != (t, t):
            raise InputError(
                f"mask shape {tuple(allowed.shape)} does not match sequence length {t}"
            )
        if int(tokens.max()) >= self.config.vocab_total or int(tokens.min()) < 0:
            raise InputError("token id outside [0, vocab_total)")
        if int(positions.max()) >= self.config.max_positions or int(positions.min()) < 0:
            raise InputError("position id outside [0, max_positions)")
        # broadcast to [N or 1, 1 head dim, T, T]
        allowed = allowed.unsqueeze(0) if allowed.dim() == 2 else allowed
        allowed = allowed.unsqueeze(1)

        x = self.tok_emb(tokens) + self.pos_emb(positions)
        for block in self.blocks:
            x = block(x, allowed)
        return self.head(self.ln_out(x))


def init_net(config: NetConfig) -> DenoiserNet:
    """Deterministic initialization from config.init_seed.

    Scheme: normal(0, 0.02) for embeddings and linear weights, with the two
    residual-output projections per block scaled down by sqrt(2 * layers);
    zero biases; unit LayerNorm. Parameters are filled in module definition
    order from a single generator, so identical (config, seed) pairs produce
    bit-identical nets.
    """
    model = DenoiserNet(config)
    gen = torch.Generator()
    gen.manual_seed(config.init_seed & 0x7FFFFFFFFFFFFFFF)
    residual_scale = 1.0 / math.sqrt(2 * config.layers)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if "ln" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                std = 0.02
                if name.endswith(("wo.weight", "w2.weight")):
                    std *= residual_scale
                param.copy_(torch.normal(0.0, std, size=param.shape, generator=gen))
    if config.precision == "f64":
        model.double()
    return model


def param_vector(model: DenoiserNet) -> torch.Tensor:
    """Flat view of all parameters in state-dict order."""
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def check_finite(value: torch.Tensor, what: str, **diagnostics) -> None:
    if not torch.isfinite(value).all():
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        raise NumericError(f"non-finite {what} ({detail})" if detail else f"non-finite {what}")


@dataclass(frozen=True)
class OptimizerSchedule:
    """AdamW with betas (0.9, 0.95), linear warmup then cosine decay, and
    global gradient-norm clipping at clip_norm."""

    peak_lr: float = 2e-3
    warmup_steps: int = 50
    total_steps: int = 1000
    final_lr: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-indexed step; warmup step w of W gives peak*w/W."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        if self.total_steps <= self.warmup_steps:
            return self.final_lr
        progress = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        progress = min(max(progress, 0.0), 1.0)
        return self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (
            1.0 + math.cos(math.pi * progress)
        )


def clip_grad_norm(params: list[torch.Tensor], max_norm: float) -> float:
    """Scale gradients so the global L2 norm is at most max_norm (no epsilon
    fudge, so a clipped norm equals max_norm to float precision)."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    total = float(total)
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


@dataclass
class TrainState:
    """Optimizer plus step counter; fresh state per training phase."""

    schedule: OptimizerSchedule
    optimizer: torch.optim.AdamW
    step: int = 0

    @classmethod
    def create(cls, model: DenoiserNet, schedule: OptimizerSchedule) -> "TrainState":
        opt = torch.optim.AdamW(
            model.parameters(),
            lr=schedule.peak_lr,
            betas=schedule.betas,
            weight_decay=schedule.weight_decay,
        )
        return cls(schedule=schedule, optimizer=opt)


def optimizer_step(state: TrainState, model: DenoiserNet) -> float:
    """Clip gradients, apply the scheduled learning rate, and update. Returns
    the learning rate used."""
    state.step += 1
    clip_grad_norm(list(model.parameters()), state.schedule.clip_norm)
    lr = state.schedule.lr_at(state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    return lr
