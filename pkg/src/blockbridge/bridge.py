"""Conversion pipeline: causal pretraining, small-block anchor conversion,
progressive block doubling, and per-stage distillation from the frozen anchor.

Every phase is self-contained and deterministic: its data order and corruption
draws come from generators keyed by (seed, phase id), so an interrupted run
resumed from stored checkpoints reproduces the uninterrupted result exactly.
The anchor teacher is never updated; distillation asserts its checkpoint hash
is unchanged.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .checkpoint import Checkpoint, StageMeta, clone_model, file_sha256, load_checkpoint, save_checkpoint
from .decode import DecodePolicy, generate, greedy_ar, summarize_traces
from .errors import ConfigError, LineageError, NumericError
from .layout import build_packed, build_packed_mask, causal_mask
from .model import DenoiserNet, NetConfig, OptimizerSchedule, TrainState, check_finite, init_net, optimizer_step
from .noise import NoiseMode, corrupt_batch_with, sample_t_batch_with
from .objectives import KDConfig, align_ar_teacher_logits, loss_ar, loss_kd, loss_kd_ar_teacher, loss_mask, loss_mix
from .rng import derive_seed
from .task import TaskParams, exact_match_mean, gen_example

EVAL_INDEX_BASE = 10_000_000  # eval examples never overlap the training pool


@dataclass(frozen=True)
class PhaseOpt:
    """Optimizer settings for one phase kind; concrete schedules are derived
    per phase from the step count."""

    peak_lr: float
    warmup_frac: float = 0.1
    final_lr_frac: float = 0.05
    weight_decay: float = 0.01

    def schedule(self, steps: int) -> OptimizerSchedule:
        return OptimizerSchedule(
            peak_lr=self.peak_lr,
            warmup_steps=max(1, int(round(self.warmup_frac * steps))),
            total_steps=max(steps, 1),
            final_lr=self.peak_lr * self.final_lr_frac,
            weight_decay=self.weight_decay,
        )


@dataclass(frozen=True)
class BridgeConfig:
    task: TaskParams = TaskParams()
    net: NetConfig = NetConfig()
    block_schedule: tuple = (4, 8, 16, 32)
    ar_steps: int = 900
    stage_steps: tuple = (700, 350, 350, 350)
    distill_steps: tuple = (200, 200, 200)  # stages 2..K
    noise_mode: NoiseMode = NoiseMode.MIXTURE
    stage_objective: str = "mix"
    kd: KDConfig = KDConfig()
    batch_size: int = 32
    ar_opt: PhaseOpt = PhaseOpt(peak_lr=3e-3, weight_decay=0.0)
    stage_opt: PhaseOpt = PhaseOpt(peak_lr=1e-3, weight_decay=0.0)
    distill_opt: PhaseOpt = PhaseOpt(peak_lr=5e-4, weight_decay=0.0)
    train_pool: int = 200_000
    distill_pool_divisor: int = 40
    eval_examples: int = 200
    eval_threshold: float = 0.9
    data_seed: int = 1
    noise_seed: int = 2
    log_every: int = 50

    def __post_init__(self) -> None:
        sched = tuple(self.block_schedule)
        if not sched:
            raise ConfigError("block schedule must not be empty")
        for a, b in zip(sched, sched[1:]):
            if b != 2 * a:
                raise ConfigError(f"block schedule must double each stage, got {a} -> {b}")
        length = self.task.response_len
        for b in sched:
            if length % b != 0:
                raise ConfigError(f"block size {b} does not divide response length {length}")
        if len(self.stage_steps) != len(sched):
            raise ConfigError("stage_steps must match the block schedule length")
        if len(self.distill_steps) != max(len(sched) - 1, 0):
            raise ConfigError("distill_steps must cover stages 2..K")
        if self.stage_objective not in ("mix", "mask"):
            raise ConfigError(f"stage objective must be mix or mask, got {self.stage_objective!r}")
        if self.net.vocab_total != self.task.vocab.total:
            raise ConfigError(
                f"net vocab_total {self.net.vocab_total} != task vocab {self.task.vocab.total}"
            )

    def direct_budget(self, stage_index: int, include_distill: bool = True) -> int:
        """Update budget for a direct-adaptation baseline at stage k: the total
        number of optimizer steps the warm chain spent producing its stage-k
        trained checkpoint (stage steps 1..k plus distillation steps 2..k-1)."""
        steps = sum(self.stage_steps[: stage_index + 1])
        if include_distill and stage_index >= 1:
            steps += sum(self.distill_steps[: stage_index - 1])
        return steps


@dataclass
class StageRecord:
    stage_index: int
    block_size: int
    phase: str
    checkpoint_id: str
    init_id: str
    teacher_id: str
    steps: int
    final_loss: float
    exact_match: float
    wall_s: float


@dataclass
class BridgeResult:
    chain: list  # final checkpoint per stage, AR checkpoint first
    records: list = field(default_factory=list)
    out_dir: Path | None = None

    def by_id(self, checkpoint_id: str) -> Checkpoint:
        for ckpt in self.chain:
            if ckpt.meta.checkpoint_id == checkpoint_id:
                return ckpt
        raise LineageError(f"no checkpoint {checkpoint_id!r} in bridge result")


class MetricsLogger:
    """Append-only JSONL metrics; one record per logging interval."""

    def __init__(self, path: Path | None, run_id: str = "", config_hash: str = "") -> None:
        self.path = Path(path) if path else None
        self.run_id = run_id
        self.config_hash = config_hash
        self._t0 = time.monotonic()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, phase: str, step: int, **metrics) -> None:
        if not self.path:
            return
        record = {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "phase": phase,
            "step": step,
            "metrics": metrics,
            "wall_s": round(time.monotonic() - self._t0, 3),
        }
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


class ExamplePool:
    """Pre-generated examples as tensors (evaluation sets, small subsets)."""

    def __init__(self, task: TaskParams, size: int, base_index: int = 0) -> None:
        examples = [gen_example(task, base_index + i) for i in range(size)]
        self.contexts = torch.tensor([e.q for e in examples], dtype=torch.long)
        self.responses = torch.tensor([e.x1 for e in examples], dtype=torch.long)
        self.task = task

    def __len__(self) -> int:
        return self.contexts.shape[0]


def sample_batch(task: TaskParams, gen: torch.Generator, batch_size: int, corpus_size: int):
    """Materialize a batch of examples drawn uniformly from the nominal corpus
    (indices [0, corpus_size)). Examples are generated on demand, so the corpus
    can be far larger than memory and is never memorized wholesale."""
    idx = torch.randint(0, corpus_size, (batch_size,), generator=gen).tolist()
    examples = [gen_example(task, i) for i in idx]
    contexts = torch.tensor([e.q for e in examples], dtype=torch.long)
    responses = torch.tensor([e.x1 for e in examples], dtype=torch.long)
    return contexts, responses


def _phase_gens(config: BridgeConfig, phase_id: str):
    data_gen = torch.Generator()
    data_gen.manual_seed(derive_seed(config.data_seed, "data", phase_id) & 0x7FFFFFFFFFFFFFFF)
    noise_gen = torch.Generator()
    noise_gen.manual_seed(derive_seed(config.noise_seed, "noise", phase_id) & 0x7FFFFFFFFFFFFFFF)
    return data_gen, noise_gen


def _seed_record(config: BridgeConfig, phase_id: str) -> dict:
    return {
        "init": config.net.init_seed,
        "data": derive_seed(config.data_seed, "data", phase_id),
        "noise": derive_seed(config.noise_seed, "noise", phase_id),
    }


def eval_greedy_exact_match(model: DenoiserNet, task: TaskParams, n: int) -> float:
    """Exact match of greedy AR decoding on n held-out examples."""
    pool = ExamplePool(task, n, base_index=EVAL_INDEX_BASE)
    preds, _ = greedy_ar(model, pool.contexts, task.response_len)
    return exact_match_mean(preds.tolist(), pool.responses.tolist())


def eval_decode_exact_match(
    model: DenoiserNet, task: TaskParams, n: int, policy: DecodePolicy
) -> tuple[float, dict]:
    """Exact match plus throughput summary of block decoding on n held-out
    examples."""
    pool = ExamplePool(task, n, base_index=EVAL_INDEX_BASE)
    preds, traces = generate(model, pool.contexts, task.response_len, policy)
    em = exact_match_mean(preds.tolist(), pool.responses.tolist())
    return em, summarize_traces(traces)


def _run_updates(
    model: DenoiserNet,
    steps: int,
    schedule: OptimizerSchedule,
    step_fn,
    logger: MetricsLogger,
    phase_id: str,
    log_every: int,
) -> float:
    state = TrainState.create(model, schedule)
    final_loss = 0.0
    for step in range(1, steps + 1):
        loss = step_fn()
        try:
            check_finite(loss, "loss", phase=phase_id, step=step)
        except NumericError:
            raise NumericError(
                f"training diverged: non-finite loss at {phase_id} step {step}"
            ) from None
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        lr = optimizer_step(state, model)
        final_loss = float(loss.detach())
        if step % log_every == 0 or step == steps:
            logger.log(phase_id, step, loss=final_loss, lr=lr)
    return final_loss


def train_ar(
    config: BridgeConfig,
    logger: MetricsLogger | None = None,
    eval_after: bool = True,
) -> tuple[Checkpoint, StageRecord]:
    """Pretrain the causal next-token model from a fresh initialization."""
    logger = logger or MetricsLogger(None)
    t0 = time.monotonic()
    model = init_net(config.net)
    data_gen, _ = _phase_gens(config, "ar")
    q_len, length = config.task.context_len, config.task.response_len
    mask = causal_mask(q_len + length)
    positions = torch.arange(q_len + length)

    def step_fn():
        q, x1 = sample_batch(config.task, data_gen, config.batch_size, config.train_pool)
        tokens = torch.cat([q, x1], dim=1)
        logits = model(tokens, positions.expand(tokens.shape[0], -1), mask)
        return loss_ar(logits, x1, q_len)

    final_loss = _run_updates(
        model, config.ar_steps, config.ar_opt.schedule(config.ar_steps),
        step_fn, logger, "ar", config.log_every,
    )
    em = eval_greedy_exact_match(model, config.task, config.eval_examples) if eval_after else -1.0
    meta = StageMeta(
        checkpoint_id="ar",
        phase="ar",
        objective="ar",
        stage_index=0,
        steps=config.ar_steps,
        seeds=_seed_record(config, "ar"),
    )
    record = StageRecord(
        stage_index=0, block_size=0, phase="ar", checkpoint_id="ar", init_id="",
        teacher_id="", steps=config.ar_steps, final_loss=final_loss, exact_match=em,
        wall_s=time.monotonic() - t0,
    )
    logger.log("ar", config.ar_steps, exact_match=em)
    return Checkpoint(model=model, meta=meta), record


def train_stage(
    init: Checkpoint,
    block_size: int,
    steps: int,
    config: BridgeConfig,
    checkpoint_id: str,
    stage_index: int,
    phase_id: str | None = None,
    objective: str | None = None,
    logger: MetricsLogger | None = None,
    eval_after: bool = True,
) -> tuple[Checkpoint, StageRecord]:
    """Teacher-forcing conversion at one block size, warm-started from `init`.

    Each batch draws a fresh corruption level per sequence and trains the
    denoising objective on the packed layout.
    """
    objective = objective or config.stage_objective
    if objective not in ("mix", "mask"):
        raise ConfigError(f"stage objective must be mix or mask, got {objective!r}")
    length = config.task.response_len
    if length % block_size != 0:
        raise ConfigError(f"block size {block_size} does not divide response length {length}")
    logger = logger or MetricsLogger(None)
    t0 = time.monotonic()
    model = clone_model(init.model)
    data_gen, noise_gen = _phase_gens(config, phase_id or checkpoint_id)
    q_len = config.task.context_len
    vocab = config.task.vocab

    probe = gen_example(config.task, 0)
    probe_resp = torch.tensor(probe.x1, dtype=torch.long)
    template = build_packed(
        torch.tensor(probe.q, dtype=torch.long), probe_resp, probe_resp, block_size
    )
    mask = build_packed_mask(template)
    positions = template.positions

    def step_fn():
        q, x1 = sample_batch(config.task, data_gen, config.batch_size, config.train_pool)
        t = sample_t_batch_with(noise_gen, x1.shape[0])
        x_t, masked, uniform = corrupt_batch_with(noise_gen, x1, t, vocab, config.noise_mode)
        tokens = torch.cat([q, x1, x_t], dim=1)
        logits = model(tokens, positions.expand(tokens.shape[0], -1), mask)
        resp_logits = logits[:, -length:, :]
        if objective == "mask":
            return loss_mask(resp_logits, masked, x1)
        return loss_mix(resp_logits, masked | uniform, x1)

    final_loss = _run_updates(
        model, steps, config.stage_opt.schedule(steps), step_fn, logger,
        phase_id or checkpoint_id, config.log_every,
    )
    em = -1.0
    if eval_after:
        em, _ = eval_decode_exact_match(
            model, config.task, config.eval_examples,
            DecodePolicy(block_size=block_size, threshold=config.eval_threshold),
        )
    meta = StageMeta(
        checkpoint_id=checkpoint_id,
        phase="train",
        block_size=block_size,
        objective=objective,
        parent=init.meta.checkpoint_id,
        stage_index=stage_index,
        steps=steps,
        seeds=_seed_record(config, phase_id or checkpoint_id),
        noise_mode=config.noise_mode.value,
    )
    record = StageRecord(
        stage_index=stage_index, block_size=block_size, phase="train",
        checkpoint_id=checkpoint_id, init_id=init.meta.checkpoint_id, teacher_id="",
        steps=steps, final_loss=final_loss, exact_match=em, wall_s=time.monotonic() - t0,
    )
    logger.log(phase_id or checkpoint_id, steps, exact_match=em)
    return Checkpoint(model=model, meta=meta), record


def distill_stage(
    student: Checkpoint,
    teacher: Checkpoint,
    block_size: int,
    steps: int,
    kd: KDConfig,
    config: BridgeConfig,
    checkpoint_id: str,
    stage_index: int,
    phase_id: str | None = None,
    logger: MetricsLogger | None = None,
    eval_after: bool = True,
) -> tuple[Checkpoint, StageRecord]:
    """Distill the stage checkpoint from a frozen teacher on the shared
    corruption stream (the same noised batch feeds both models).

    The diffusion teacher runs under its own packed mask at kd.teacher_block;
    the autoregressive teacher runs causally on clean [context, response] with
    its next-token logits aligned to the student's response positions.
    """
    if teacher.config.vocab_total != student.config.vocab_total:
        raise ConfigError(
            f"teacher vocab {teacher.config.vocab_total} != student vocab "
            f"{student.config.vocab_total}"
        )
    length = config.task.response_len
    if length % block_size != 0:
        raise ConfigError(f"block size {block_size} does not divide response length {length}")
    logger = logger or MetricsLogger(None)
    t0 = time.monotonic()
    model = clone_model(student.model)
    teacher_model = teacher.model
    teacher_model.eval()
    distill_corpus = max(1, config.train_pool // config.distill_pool_divisor)
    data_gen, noise_gen = _phase_gens(config, phase_id or checkpoint_id)
    q_len = config.task.context_len
    vocab = config.task.vocab

    probe = gen_example(config.task, 0)
    probe_resp = torch.tensor(probe.x1, dtype=torch.long)
    probe_ctx = torch.tensor(probe.q, dtype=torch.long)
    template = build_packed(probe_ctx, probe_resp, probe_resp, block_size)
    student_mask = build_packed_mask(template)
    positions = template.positions
    ar_teacher = kd.teacher_kind == "autoregressive"
    if ar_teacher:
        clean_mask = causal_mask(q_len + length)
        clean_positions = torch.arange(q_len + length)
    else:
        if length % kd.teacher_block != 0:
            raise ConfigError(
                f"teacher block {kd.teacher_block} does not divide response length {length}"
            )
        teacher_mask = build_packed_mask(
            build_packed(probe_ctx, probe_resp, probe_resp, kd.teacher_block)
        )

    def step_fn():
        q, x1 = sample_batch(config.task, data_gen, config.batch_size, distill_corpus)
        t = sample_t_batch_with(noise_gen, x1.shape[0])
        x_t, masked, uniform = corrupt_batch_with(noise_gen, x1, t, vocab, config.noise_mode)
        supervised = masked | uniform
        tokens = torch.cat([q, x1, x_t], dim=1)
        with torch.no_grad():
            if ar_teacher:
                clean_tokens = torch.cat([q, x1], dim=1)
                t_logits = teacher_model(
                    clean_tokens, clean_positions.expand(q.shape[0], -1), clean_mask
                )
                teacher_logits = align_ar_teacher_logits(t_logits, q_len, length)
            else:
                t_logits = teacher_model(
                    tokens, positions.expand(tokens.shape[0], -1), teacher_mask
                )
                teacher_logits = t_logits[:, -length:, :]
        logits = model(tokens, positions.expand(tokens.shape[0], -1), student_mask)
        resp_logits = logits[:, -length:, :]
        if ar_teacher:
            return loss_kd_ar_teacher(resp_logits, teacher_logits, supervised, kd.tau)
        return loss_kd(resp_logits, teacher_logits, supervised, kd.tau)

    final_loss = _run_updates(
        model, steps, config.distill_opt.schedule(steps), step_fn, logger,
        phase_id or checkpoint_id, config.log_every,
    )
    em = -1.0
    if eval_after:
        em, _ = eval_decode_exact_match(
            model, config.task, config.eval_examples,
            DecodePolicy(block_size=block_size, threshold=config.eval_threshold),
        )
    meta = StageMeta(
        checkpoint_id=checkpoint_id,
        phase="distill",
        block_size=block_size,
        objective="kd_ar" if ar_teacher else "kd",
        parent=student.meta.checkpoint_id,
        teacher=teacher.meta.checkpoint_id,
        stage_index=stage_index,
        steps=steps,
        seeds=_seed_record(config, phase_id or checkpoint_id),
        noise_mode=config.noise_mode.value,
    )
    record = StageRecord(
        stage_index=stage_index, block_size=block_size, phase="distill",
        checkpoint_id=checkpoint_id, init_id=student.meta.checkpoint_id,
        teacher_id=teacher.meta.checkpoint_id, steps=steps, final_loss=final_loss,
        exact_match=em, wall_s=time.monotonic() - t0,
    )
    logger.log(phase_id or checkpoint_id, steps, exact_match=em)
    return Checkpoint(model=model, meta=meta), record


def _store_path(out_dir: Path, checkpoint_id: str) -> Path:
    return out_dir / f"{checkpoint_id}.ckpt"


def run_bridge(
    config: BridgeConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
    strategy: str = "warm",
    distill_teacher: str = "anchor",
    stages: list[int] | None = None,
    logger: MetricsLogger | None = None,
) -> BridgeResult:
    """Execute the full conversion and return the checkpoint chain.

    strategy "warm" runs the progressive schedule (each stage warm-starts from
    the previous stage's final checkpoint, then distills from the frozen
    anchor); "direct" adapts the pretrained causal model straight to each
    requested block size with the warm chain's cumulative update budget.
    distill_teacher selects the anchor, the causal model, or no distillation.
    stages restricts which schedule entries (1-based) are run.
    """
    if strategy not in ("warm", "direct"):
        raise ConfigError(f"strategy must be warm or direct, got {strategy!r}")
    if distill_teacher not in ("anchor", "ar", "none"):
        raise ConfigError(f"distill_teacher must be anchor, ar or none, got {distill_teacher!r}")
    out_path = Path(out_dir) if out_dir else None
    logger = logger or MetricsLogger(None)
    schedule = tuple(config.block_schedule)
    wanted = set(stages) if stages else set(range(1, len(schedule) + 1))
    for s in wanted:
        if not 1 <= s <= len(schedule):
            raise ConfigError(f"stage {s} outside schedule of length {len(schedule)}")

    records: list[StageRecord] = []
    chain: list[Checkpoint] = []

    def materialize(checkpoint_id: str, producer):
        """Load the checkpoint when resuming, otherwise produce and store it."""
        if out_path and resume and _store_path(out_path, checkpoint_id).exists():
            ckpt = load_checkpoint(_store_path(out_path, checkpoint_id))
            return ckpt, None
        ckpt, record = producer()
        if out_path:
            save_checkpoint(ckpt, _store_path(out_path, checkpoint_id))
        return ckpt, record

    ar_ckpt, ar_record = materialize("ar", lambda: train_ar(config, logger))
    if ar_record:
        records.append(ar_record)
    chain.append(ar_ckpt)

    if strategy == "direct":
        for k in sorted(wanted):
            block = schedule[k - 1]
            cid = f"direct_b{block}"
            budget = config.direct_budget(k - 1, include_distill=distill_teacher != "none")
            ckpt, record = materialize(
                cid,
                lambda block=block, cid=cid, budget=budget, k=k: train_stage(
                    ar_ckpt, block, budget, config, cid, k, logger=logger
                ),
            )
            if record:
                records.append(record)
            chain.append(ckpt)
        if out_path:
            _write_records(out_path, records)
        return BridgeResult(chain=chain, records=records, out_dir=out_path)

    anchor: Checkpoint | None = None
    anchor_hash: str | None = None
    previous = ar_ckpt
    for k, block in enumerate(schedule, start=1):
        trained_id = f"b{block}" if k == 1 else f"b{block}_trained"
        if k > 1 and previous is None:
            raise LineageError(f"missing upstream checkpoint for stage {k} (block {block})")
        ckpt, record = materialize(
            trained_id,
            lambda block=block, trained_id=trained_id, k=k, init=previous: train_stage(
                init, block, config.stage_steps[k - 1], config, trained_id, k, logger=logger
            ),
        )
        if record:
            records.append(record)
        if k == 1:
            anchor = ckpt
            if out_path:
                anchor_hash = file_sha256(_store_path(out_path, "b%d" % block))
            previous = ckpt
            if 1 in wanted:
                chain.append(ckpt)
            if max(wanted) == 1:
                break
            continue

        if distill_teacher == "none" or config.distill_steps[k - 2] == 0:
            final = ckpt
        else:
            teacher = ar_ckpt if distill_teacher == "ar" else anchor
            kd = config.kd if distill_teacher == "anchor" else replace(
                config.kd, teacher_kind="autoregressive"
            )
            final, d_record = materialize(
                f"b{block}",
                lambda block=block, k=k, ckpt=ckpt, teacher=teacher, kd=kd: distill_stage(
                    ckpt, teacher, block, config.distill_steps[k - 2], kd, config,
                    f"b{block}", k, logger=logger,
                ),
            )
            if d_record:
                records.append(d_record)
            if anchor_hash is not None:
                now = file_sha256(_store_path(out_path, f"b{schedule[0]}"))
                if now != anchor_hash:
                    raise LineageError("anchor teacher checkpoint changed during distillation")
        previous = final
        if k in wanted:
            chain.append(final)
        if k == max(wanted):
            break

    result = BridgeResult(chain=chain, records=records, out_dir=out_path)
    if out_path:
        _write_records(out_path, records)
    return result


def _write_records(out_dir: Path, records: list[StageRecord]) -> None:
    path = out_dir / "stage_records.json"
    existing = []
    if path.exists():
        existing = json.loads(path.read_text())
    existing.extend(asdict(r) for r in records)
    path.write_text(json.dumps(existing, indent=2, sort_keys=True))
