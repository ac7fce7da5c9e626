"""Checkpoint files: a JSON header followed by a raw little-endian parameter blob.

Layout: magic line, u32 little-endian header length, UTF-8 JSON header, then
the concatenated parameter tensors in state-dict order. The header carries the
net config, dtype, parameter names/shapes, and stage metadata (block size,
objective, lineage, seeds). Round-trips are byte-exact: the header JSON is
canonicalized (sorted keys, no whitespace) and the blob is written verbatim.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import ConfigError, LineageError
from .model import DenoiserNet, NetConfig, init_net

MAGIC = b"blockbridge-ckpt-v1\n"

_DTYPE_BYTES = {"f32": 4, "f64": 8}
_DTYPE_TORCH = {"f32": torch.float32, "f64": torch.float64}


@dataclass
class StageMeta:
    """Provenance of a checkpoint within the conversion pipeline."""

    checkpoint_id: str
    phase: str  # "ar" | "train" | "distill" | "init"
    block_size: int = 0
    objective: str = ""
    parent: str = ""
    teacher: str = ""
    stage_index: int = 0
    steps: int = 0
    seeds: dict = field(default_factory=dict)
    noise_mode: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageMeta":
        return cls(**d)


@dataclass
class Checkpoint:
    model: DenoiserNet
    meta: StageMeta

    @property
    def config(self) -> NetConfig:
        return self.model.config


def _header_bytes(config: NetConfig, meta: StageMeta, model: DenoiserNet) -> bytes:
    header = {
        "format": "blockbridge-checkpoint/1",
        "net": asdict(config),
        "dtype": config.precision,
        "params": [
            {"name": name, "shape": list(tensor.shape)}
            for name, tensor in model.state_dict().items()
        ],
        "meta": meta.to_dict(),
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    if sys.byteorder != "little":
        raise ConfigError("checkpoint blobs are little-endian; big-endian hosts unsupported")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header_bytes(ckpt.config, ckpt.meta, ckpt.model)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        for tensor in ckpt.model.state_dict().values():
            f.write(tensor.detach().contiguous().numpy().tobytes())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise LineageError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise LineageError(f"{path} is not a checkpoint file (bad magic)")
    off = len(MAGIC)
    header_len = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    header = json.loads(raw[off : off + header_len].decode("utf-8"))
    off += header_len
    if header.get("format") != "blockbridge-checkpoint/1":
        raise LineageError(f"unsupported checkpoint format in {path}")

    config = NetConfig(**header["net"])
    model = init_net(config)
    dtype = _DTYPE_TORCH[header["dtype"]]
    itemsize = _DTYPE_BYTES[header["dtype"]]
    state = {}
    for entry in header["params"]:
        shape = entry["shape"]
        numel = 1
        for s in shape:
            numel *= s
        nbytes = numel * itemsize
        chunk = bytearray(raw[off : off + nbytes])
        if len(chunk) != nbytes:
            raise LineageError(f"truncated parameter blob in {path} at {entry['name']}")
        state[entry["name"]] = torch.frombuffer(chunk, dtype=dtype).reshape(shape).clone()
        off += nbytes
    if off != len(raw):
        raise LineageError(f"{len(raw) - off} trailing bytes in {path}")
    model.load_state_dict(state)
    return Checkpoint(model=model, meta=StageMeta.from_dict(header["meta"]))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def clone_model(model: DenoiserNet) -> DenoiserNet:
    """Independent copy with identical parameters."""
    twin = init_net(model.config)
    twin.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    return twin
