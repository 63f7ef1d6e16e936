"""Versioned checkpoints: named tensors + config snapshot + stage tag.

Stored with safetensors; the config (INI text) and the stage live in the
header metadata. Writes are atomic and byte-deterministic for equal weights.
safetensors does not keep metadata key order, so everything goes into one
key holding sorted JSON.
"""
from __future__ import annotations

import json
import os
import tempfile

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save
from safetensors import safe_open

from .config import RunConfig
from .errors import ConfigError, StageMismatch
from .model import HEAD_PREFIXES, MMFFNet

FORMAT_VERSION = "1"
META_KEY = "mmff"


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: MMFFNet, cfg: RunConfig, stage: int) -> bytes:
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in model.network_state().items()}
    meta = {"format_version": FORMAT_VERSION, "stage": str(int(stage)), "config": cfg.to_ini(),
            "num_classes": str(model.num_classes)}
    return st_save(tensors, metadata={META_KEY: json.dumps(meta, sort_keys=True)})


def save_checkpoint(path, model: MMFFNet, cfg: RunConfig, stage: int) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model, cfg, stage))


def read_metadata(path) -> dict:
    with safe_open(os.fspath(path), framework="pt") as fh:
        raw = (fh.metadata() or {}).get(META_KEY)
    try:
        meta = json.loads(raw) if raw else {}
    except ValueError:
        meta = {}
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format_version')!r}")
    return meta


def load_checkpoint(path, min_stage: int = 0) -> tuple[MMFFNet, RunConfig, int]:
    """Rebuild the network from a checkpoint; ``StageMismatch`` if its stage < ``min_stage``."""
    meta = read_metadata(path)
    stage = int(meta["stage"])
    if stage < min_stage:
        raise StageMismatch(f"{path}: checkpoint is from stage {stage}, need stage >= {min_stage}")
    cfg = RunConfig.from_ini(meta["config"])
    with open(path, "rb") as fh:
        tensors = st_load(fh.read())
    model = MMFFNet(cfg, int(meta["num_classes"]))
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    missing = [k for k in missing if not k.startswith(HEAD_PREFIXES)]
    if missing or unexpected:
        raise ConfigError(f"{path}: checkpoint does not match its config "
                          f"(missing {missing[:3]}, unexpected {unexpected[:3]})")
    return model, cfg, stage
