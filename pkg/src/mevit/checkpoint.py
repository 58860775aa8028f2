"""Versioned checkpoint persistence.

Layout: 4-byte magic, little-endian u32 format version, little-endian u64
header length, a canonical JSON header (config, task, branch descriptors,
training metadata, tensor index), then every parameter concatenated as
little-endian float64. Round trips are bit-exact and save(load(save(m)))
produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .branches import MixerExit, ResMlpExit
from .multi_exit import MultiExitModel
from .vit import ViTBackbone, ViTConfig

__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "VersionMismatchError",
    "ConfigMismatchError",
    "CorruptCheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"MEVT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _branch_descriptor(location: int, arch: str, branch) -> dict:
    desc = {"location": location, "arch": arch}
    if isinstance(branch, (MixerExit, ResMlpExit)):
        desc["pool_includes_cls"] = branch.pool_includes_cls
    return desc


def save_checkpoint(model: MultiExitModel, path, metadata: dict | None = None) -> None:
    """Write the model's configuration, branch map and all parameters."""
    named = list(model.named_parameters())
    index = []
    offset = 0
    for name, tensor in named:
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += tensor.size
    header = {
        "config": asdict(model.config),
        "task": model.task,
        "backbone_trained": model.backbone_trained,
        "branches": [
            _branch_descriptor(location, arch, branch)
            for location, arch, branch in model.iter_branches()
        ],
        "metadata": metadata or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, tensor in named:
            f.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path, expected_config: ViTConfig | None = None) -> MultiExitModel:
    """Rebuild the model from a checkpoint; parameters load bit-exactly."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable header ({e})") from None

    config = ViTConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(
            f"{path}: checkpoint config {config} does not match expected {expected_config}"
        )
    model = MultiExitModel(ViTBackbone(config, seed=0), task=header["task"])
    model.backbone_trained = bool(header.get("backbone_trained", False))
    model.checkpoint_metadata = header.get("metadata", {})
    for desc in header["branches"]:
        model.add_branch(
            desc["location"],
            desc["arch"],
            seed=0,
            pool_includes_cls=desc.get("pool_includes_cls", True),
        )

    blob = np.frombuffer(raw[16 + header_len :], dtype="<f8")
    named = dict(model.named_parameters())
    index_names = {entry["name"] for entry in header["tensors"]}
    if index_names != set(named):
        missing = set(named) - index_names
        extra = index_names - set(named)
        raise CorruptCheckpointError(
            f"{path}: tensor index mismatch (missing {sorted(missing)}, extra {sorted(extra)})"
        )
    for entry in header["tensors"]:
        tensor = named[entry["name"]]
        start, size = entry["offset"], tensor.size
        if tuple(entry["shape"]) != tensor.shape:
            raise CorruptCheckpointError(
                f"{path}: {entry['name']} shape {entry['shape']} vs model {tensor.shape}"
            )
        if start + size > blob.size:
            raise CorruptCheckpointError(f"{path}: blob too short for {entry['name']}")
        tensor.data[...] = blob[start : start + size].reshape(tensor.shape)
    return model
