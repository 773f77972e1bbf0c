"""Checkpoint files: every byte of run state, bit-exact on round trip.

Layout (little-endian): magic "XSMAE1", 32-byte config hash, the config
text itself (length-prefixed, so a checkpoint alone can rebuild its
model), a count of named tensor blocks (step counter, parameters,
optimizer moments), then the rng stream states as length-prefixed JSON.
Writes are atomic (temp file + rename), so a crash never leaves a
truncated checkpoint behind.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_hash, config_to_text, parse_config
from .errors import CheckpointError
from .tensor import Tensor
from .tensorio import tensor_from_bytes, tensor_to_bytes
from .vit import ModelParams

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"XSMAE1"


@dataclass
class Checkpoint:
    """Model parameters, optimizer moments, step counter, rng states, config."""

    config: TrainConfig
    params: ModelParams
    step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)


def _named_tensors(ckpt: Checkpoint, config_text: str) -> list[tuple[str, np.ndarray]]:
    out = [("step", np.asarray(ckpt.step, dtype=np.int64)),
           ("__config__", np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8))]
    for name, t in ckpt.params.items():
        out.append((f"param.{name}", t.data))
    for name in ckpt.params.names():
        if name in ckpt.adam_m:
            out.append((f"adam.m.{name}", ckpt.adam_m[name]))
            out.append((f"adam.v.{name}", ckpt.adam_v[name]))
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    config_text = config_to_text(ckpt.config)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(config_hash(ckpt.config))
    tensors = _named_tensors(ckpt, config_text)
    buf.write(np.uint32(len(tensors)).tobytes())
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        buf.write(np.uint16(len(encoded)).tobytes())
        buf.write(encoded)
        buf.write(tensor_to_bytes(arr))
    rng_json = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
    buf.write(np.uint32(len(rng_json)).tobytes())
    buf.write(rng_json)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expected: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with `expected`, reject configs that don't match."""
    raw = Path(path).read_bytes()
    if raw[:6] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    stored_hash = raw[6:38]
    try:
        pos = 38
        count = int(np.frombuffer(raw, "<u4", count=1, offset=pos)[0])
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = int(np.frombuffer(raw, "<u2", count=1, offset=pos)[0])
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            tensors[name], pos = tensor_from_bytes(raw, pos)
        rng_len = int(np.frombuffer(raw, "<u4", count=1, offset=pos)[0])
        pos += 4
        rng_state = json.loads(raw[pos:pos + rng_len].decode("utf-8"))
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path} is truncated or corrupt") from exc

    if "__config__" not in tensors or "step" not in tensors:
        raise CheckpointError(f"{path} is missing required entries")
    config_text = tensors.pop("__config__").tobytes().decode("utf-8")
    config = parse_config(config_text)
    if config_hash(config) != stored_hash:
        raise CheckpointError(f"{path}: config hash does not match the stored config")
    if expected is not None and config_hash(expected) != stored_hash:
        raise CheckpointError(
            f"{path} was written with a different config than the one requested"
        )
    step = int(tensors.pop("step"))
    params: dict[str, Tensor] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[len("param."):]] = Tensor(arr, requires_grad=True)
        elif name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        else:
            raise CheckpointError(f"{path}: unexpected entry {name!r}")
    return Checkpoint(config=config, params=ModelParams(params), step=step,
                      adam_m=adam_m, adam_v=adam_v, rng_state=rng_state)
