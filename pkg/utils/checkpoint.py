# utils/checkpoint.py

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np
import torch

from utils.errors import CheckpointError
from utils.network import GROUPS, ParamStore

MAGIC = b"MAVG"
VERSION = 1


@dataclass
class Checkpoint:
    """Model tensors with group tags and trainable flags, plus run metadata"""

    meta: Dict[str, Any]
    tensors: Dict[str, torch.Tensor]
    groups: Dict[str, str]
    trainable: Dict[str, bool]

    @property
    def fingerprint(self) -> str:
        return self.meta["fingerprint"]

    @property
    def epoch(self) -> int:
        return int(self.meta["epoch"])

    def group_names(self) -> List[str]:
        return [g for g in GROUPS if g in set(self.groups.values())]


def capture(store: ParamStore, meta: Dict[str, Any]) -> Checkpoint:
    """Snapshot of every parameter and buffer (cloned)"""
    tensors, groups, trainable = {}, {}, {}
    for name, tensor, group, flag in store.tensors():
        tensors[name] = tensor.detach().clone()
        groups[name] = group
        trainable[name] = flag
    return Checkpoint(dict(meta), tensors, groups, trainable)


def restore(ckpt: Checkpoint, model: torch.nn.Module) -> None:
    """Copy checkpoint tensors into a model of the same shape; names must match exactly"""
    expected = model.state_dict()
    missing = sorted(set(expected) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not fit the model (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    state = {}
    for name, target in expected.items():
        value = ckpt.tensors[name]
        if tuple(value.shape) != tuple(target.shape):
            raise CheckpointError(f"{name}: shape {tuple(value.shape)} != model {tuple(target.shape)}")
        state[name] = value.to(target.dtype)
    model.load_state_dict(state)


def _records(ckpt):
    for name, tensor in ckpt.tensors.items():
        group = ckpt.groups[name]
        yield name, GROUPS.index(group), ckpt.trainable[name], tensor


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    records = list(_records(ckpt))
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(records))]
    for name, group, trainable, tensor in records:
        raw = name.encode("utf-8")
        values = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BBB", group, int(trainable), values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.offset}")
        values = struct.unpack_from(fmt, self.blob, self.offset)
        self.offset += size
        return values

    def raw(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk


def decode(blob: bytes, path="<bytes>") -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    reader = _Reader(blob, path)
    reader.offset = 4
    version, meta_len = reader.take("<HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(reader.raw(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: metadata block is unreadable ({e})") from e
    if not isinstance(meta, dict) or "fingerprint" not in meta:
        raise CheckpointError(f"{path}: metadata block lacks a config fingerprint")

    (count,) = reader.take("<I")
    tensors, groups, trainable = {}, {}, {}
    for _ in range(count):
        (name_len,) = reader.take("<H")
        try:
            name = reader.raw(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: tensor name is not UTF-8 at byte {reader.offset}") from e
        group, flag, rank = reader.take("<BBB")
        if group >= len(GROUPS):
            raise CheckpointError(f"{path}: tensor {name!r} has unknown group tag {group}")
        shape = reader.take(f"<{rank}I")
        values = np.frombuffer(reader.raw(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        tensor = torch.from_numpy(values.astype(np.float32))
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = tensor
        groups[name] = GROUPS[group]
        trainable[name] = bool(flag)

    if reader.offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - reader.offset} trailing bytes after the last tensor")
    return Checkpoint(meta, tensors, groups, trainable)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode(blob, path)
