"""Run configuration, stored as sectioned key = value text (INI).

Values are JSON literals so that every field round-trips exactly::

    [model]
    backbone = "stgcn"
    gcn_channels = [16, 32, 32]
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
import io
import json
import os

from .errors import ConfigError


@dataclass
class ModelConfig:
    backbone: str = "stgcn"            # "stgcn" | "bilstm"
    fusion: str = "gcn"                # "gcn" | "lstm" | "decision" | "sum"
    num_classes: int = 0               # 0: take from the dataset
    joint_schema: str = "synth10"
    graph_strategy: str = "spatial"
    degree_mode: str = "full"
    seq_len: int = 24                  # frames kept after resampling
    pad_len: int = 0                   # 0: no padding
    gcn_channels: tuple = (16, 32, 32)
    gcn_strides: tuple = (1, 2, 2)
    temporal_kernel: int = 3
    residual: bool = True
    lstm_hidden: int = 16
    lstm_layers: int = 3
    cnn_channels: tuple = (16, 32)
    cnn_strides: tuple = (2, 2)
    cnn_batch_norm: bool = True
    attn_dim: int = 32
    self_attention: bool = True
    skeleton_attention: bool = True
    square_frac: float = 0.25
    relation_channels: int = 0         # 0: (C_S + C_R) // 2
    relation_mode: str = "matmul"      # "matmul" | "broadcast"
    head_channels: int = 32
    head_hidden: int = 32
    decision_weight: float = 0.5
    va_center: str = "mean"


@dataclass
class AugmentConfig:
    data_augmentation: bool = True
    projection_crop: bool = True
    n_rot: int = 2
    n_scale: int = 2
    rot_max_deg: float = 30.0
    gamma_max_deg: float = 0.0
    scale_range: tuple = (1.0, 1.2)
    crop_margin_range: tuple = (100.0, 300.0)
    crop_corners: tuple = ("TL", "TR", "BL", "BR")
    out_size: int = 299
    random_crop_frac: float = 0.875


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs_stream: int = 30
    epochs_fusion: int = 20
    epochs_finetune: int = 10
    finetune_lr_scale: float = 1.0     # stage-3 lr = lr * finetune_lr_scale
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.finetune_lr_scale >= 0:
            raise ConfigError("finetune_lr_scale must be non-negative")

    def lr_at(self, epoch: int, base: float | None = None) -> float:
        """Step schedule: lr * decay ** floor(epoch / decay_every).

        Written as a division by the reciprocal so that 1e-4 decays to exactly
        1e-5 and 1e-6 (repeated multiplication by 0.1 does not).
        """
        base = self.lr if base is None else base
        k = epoch // self.decay_every
        return base / (1.0 / self.lr_decay) ** k


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = "runs/default"
    frame_fractions: tuple = (0.5,)
    deterministic: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        m = self.model
        if m.backbone not in ("stgcn", "bilstm"):
            raise ConfigError(f"unknown backbone {m.backbone!r}")
        if m.fusion not in ("gcn", "lstm", "decision", "sum"):
            raise ConfigError(f"unknown fusion {m.fusion!r}")
        if m.fusion == "gcn" and m.backbone != "stgcn":
            raise ConfigError("gcn fusion needs the stgcn backbone")
        if not self.frame_fractions or not all(0 <= f <= 1 for f in self.frame_fractions):
            raise ConfigError("frame_fractions must be non-empty and within [0, 1]")
        if check_paths and self.dataset and not os.path.exists(self.dataset):
            raise ConfigError(f"dataset path {self.dataset!r} does not exist")
        return self

    @property
    def rgb_mode(self) -> str:
        # the RGB stream follows the skeleton backbone so decision/sum heads reuse its features
        return "gcn" if self.model.backbone == "stgcn" else "lstm"

    # -- serialisation ---------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        top = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if not dataclasses.is_dataclass(getattr(self, f.name))}
        cp["run"] = {k: json.dumps(_plain(v)) for k, v in top.items()}
        for sect in ("model", "augment", "train"):
            obj = getattr(self, sect)
            cp[sect] = {f.name: json.dumps(_plain(getattr(obj, f.name))) for f in dataclasses.fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"unparseable config: {e}") from None
        known = {"run", "model", "augment", "train"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        cfg = cls()
        if cp.has_section("run"):
            _apply(cfg, cp["run"], skip_nested=True)
        for sect in ("model", "augment", "train"):
            if cp.has_section(sect):
                _apply(getattr(cfg, sect), cp[sect])
        cfg.train.__post_init__()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_ini(fh.read())
        except FileNotFoundError:
            raise ConfigError(f"config file {path!r} not found") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _coerce(value, default):
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if type(default) is not type(value):
        raise ConfigError(f"expected {type(default).__name__}, got {value!r}")
    return value


def _apply(obj, section, skip_nested=False):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, raw in section.items():
        if key not in fields or (skip_nested and dataclasses.is_dataclass(getattr(obj, key))):
            raise ConfigError(f"unknown key {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are accepted
        try:
            setattr(obj, key, _coerce(value, getattr(obj, key)))
        except ConfigError as e:
            raise ConfigError(f"{key}: {e}") from None


def desk_config(dataset: str = "", out_dir: str = "runs/desk") -> RunConfig:
    """Reference configuration for the synthetic desk-scale dataset (64 x 64 frames).

    Margins and crop size shrink with the frames; the tiny networks need a
    larger step size than 1e-4 to train in a handful of epochs (same decay
    schedule). Fine-tuning runs at a hundredth of it, back at 1e-4.
    """
    cfg = RunConfig(dataset=dataset, out_dir=out_dir)
    cfg.augment.crop_margin_range = (4.0, 12.0)
    cfg.augment.out_size = 32
    t = cfg.train
    t.lr = 1e-2
    t.epochs_stream, t.epochs_fusion, t.epochs_finetune = 20, 10, 5
    t.finetune_lr_scale = 0.01
    return cfg
