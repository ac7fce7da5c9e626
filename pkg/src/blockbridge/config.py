"""Run configuration: a versioned JSON document validated before any work.

Unknown keys are rejected at every nesting level so typos cannot silently
change an experiment. The canonical config hash (sha256 of the sorted,
whitespace-free JSON) stamps checkpoints and metrics records.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bridge import BridgeConfig, PhaseOpt
from .decode import DecodePolicy
from .errors import ConfigError
from .model import NetConfig
from .noise import NoiseMode
from .objectives import KDConfig
from .task import TaskParams, Vocab

SCHEMA_ID = "blockbridge-run/1"


@dataclass
class RunConfig:
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    policies: list = field(default_factory=list)  # DecodePolicy list for decode/bench
    out_dir: str = "runs/default"
    n_examples: int = 10  # gen-data count

    @property
    def task(self) -> TaskParams:
        return self.bridge.task

    @property
    def net(self) -> NetConfig:
        return self.bridge.net


def _take(section: dict, allowed: dict, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    out = {}
    for key, conv in allowed.items():
        if key in section:
            out[key] = conv(section[key]) if conv else section[key]
    return out


def _parse_task(section: dict) -> TaskParams:
    fields = _take(
        section,
        {
            "num_pairs": int, "num_queries": int, "value_len": int,
            "haystack_slack": int, "seed": int, "vocab_size": int,
        },
        "task",
    )
    vocab_size = fields.pop("vocab_size", None)
    if vocab_size is not None:
        fields["vocab"] = Vocab(size=vocab_size)
    return TaskParams(**fields)


def _parse_net(section: dict, vocab_total: int) -> NetConfig:
    fields = _take(
        section,
        {
            "layers": int, "model_dim": int, "heads": int, "ff_dim": int,
            "max_positions": int, "init_seed": int, "precision": str,
        },
        "net",
    )
    return NetConfig(vocab_total=vocab_total, **fields)


def _parse_phase_opt(section: dict, where: str) -> PhaseOpt:
    fields = _take(
        section,
        {"peak_lr": float, "warmup_frac": float, "final_lr_frac": float, "weight_decay": float},
        where,
    )
    return PhaseOpt(**fields)


def _parse_kd(section: dict) -> KDConfig:
    fields = _take(
        section, {"tau": float, "teacher_block": int, "teacher_kind": str}, "bridge.kd"
    )
    return KDConfig(**fields)


def _parse_bridge(section: dict, task: TaskParams, net: NetConfig) -> BridgeConfig:
    allowed = {
        "block_schedule": lambda v: tuple(int(x) for x in v),
        "ar_steps": int,
        "stage_steps": lambda v: tuple(int(x) for x in v),
        "distill_steps": lambda v: tuple(int(x) for x in v),
        "noise_mode": NoiseMode,
        "stage_objective": str,
        "kd": None,
        "batch_size": int,
        "ar_opt": None,
        "stage_opt": None,
        "distill_opt": None,
        "train_pool": int,
        "distill_pool_divisor": int,
        "eval_examples": int,
        "eval_threshold": float,
        "data_seed": int,
        "noise_seed": int,
        "log_every": int,
    }
    fields = _take(section, allowed, "bridge")
    if "kd" in fields:
        fields["kd"] = _parse_kd(fields["kd"])
    for opt_key in ("ar_opt", "stage_opt", "distill_opt"):
        if opt_key in fields:
            fields[opt_key] = _parse_phase_opt(fields[opt_key], f"bridge.{opt_key}")
    return BridgeConfig(task=task, net=net, **fields)


def _parse_policy(section: dict, index: int) -> DecodePolicy:
    fields = _take(
        section,
        {
            "block_size": int, "threshold": float,
            "max_steps_per_block": int, "revision_enabled": bool,
        },
        f"policies[{index}]",
    )
    return DecodePolicy(**fields)


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    allowed = {
        "schema": str, "task": None, "net": None, "bridge": None,
        "policies": None, "out_dir": str, "n_examples": int,
    }
    top = _take(doc, allowed, "run config")
    schema = top.get("schema")
    if schema != SCHEMA_ID:
        raise ConfigError(f"config schema must be {SCHEMA_ID!r}, got {schema!r}")
    task = _parse_task(top.get("task", {}))
    net = _parse_net(top.get("net", {}), vocab_total=task.vocab.total)
    bridge = _parse_bridge(top.get("bridge", {}), task, net)
    policies = [
        _parse_policy(p, i) for i, p in enumerate(top.get("policies", []))
    ]
    return RunConfig(
        bridge=bridge,
        policies=policies,
        out_dir=top.get("out_dir", "runs/default"),
        n_examples=top.get("n_examples", 10),
    )


def load_run_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return parse_run_config(doc)


def resolved_config_doc(config: RunConfig) -> dict:
    """Fully-resolved config document (all defaults expanded)."""
    bridge = config.bridge
    return {
        "schema": SCHEMA_ID,
        "task": {
            "num_pairs": bridge.task.num_pairs,
            "num_queries": bridge.task.num_queries,
            "value_len": bridge.task.value_len,
            "haystack_slack": bridge.task.haystack_slack,
            "seed": bridge.task.seed,
            "vocab_size": bridge.task.vocab.size,
        },
        "net": {
            "layers": bridge.net.layers,
            "model_dim": bridge.net.model_dim,
            "heads": bridge.net.heads,
            "ff_dim": bridge.net.ff_dim,
            "max_positions": bridge.net.max_positions,
            "init_seed": bridge.net.init_seed,
            "precision": bridge.net.precision,
        },
        "bridge": {
            "block_schedule": list(bridge.block_schedule),
            "ar_steps": bridge.ar_steps,
            "stage_steps": list(bridge.stage_steps),
            "distill_steps": list(bridge.distill_steps),
            "noise_mode": bridge.noise_mode.value,
            "stage_objective": bridge.stage_objective,
            "kd": {
                "tau": bridge.kd.tau,
                "teacher_block": bridge.kd.teacher_block,
                "teacher_kind": bridge.kd.teacher_kind,
            },
            "batch_size": bridge.batch_size,
            "ar_opt": _opt_doc(bridge.ar_opt),
            "stage_opt": _opt_doc(bridge.stage_opt),
            "distill_opt": _opt_doc(bridge.distill_opt),
            "train_pool": bridge.train_pool,
            "distill_pool_divisor": bridge.distill_pool_divisor,
            "eval_examples": bridge.eval_examples,
            "eval_threshold": bridge.eval_threshold,
            "data_seed": bridge.data_seed,
            "noise_seed": bridge.noise_seed,
            "log_every": bridge.log_every,
        },
        "policies": [
            {
                "block_size": p.block_size,
                "threshold": p.threshold,
                "max_steps_per_block": p.max_steps,
                "revision_enabled": p.revision_enabled,
            }
            for p in config.policies
        ],
        "out_dir": config.out_dir,
        "n_examples": config.n_examples,
    }


def _opt_doc(opt: PhaseOpt) -> dict:
    return {
        "peak_lr": opt.peak_lr,
        "warmup_frac": opt.warmup_frac,
        "final_lr_frac": opt.final_lr_frac,
        "weight_decay": opt.weight_decay,
    }


def config_hash(config: RunConfig) -> str:
    doc = json.dumps(resolved_config_doc(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:12]
