"""Three-stage training, evaluation and the ablation runner.

1. each stream is trained alone with a temporary linear classifier;
2. the streams are frozen and only the fusion module is trained;
3. everything is fine-tuned together.

All randomness flows from ``TrainConfig.seed``; with deterministic mode on
(one thread, deterministic kernels) two runs give bit-identical weights.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
import hashlib
import json
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, TrainConfig
from .dataset import TensorData, prepare
from .errors import DataEmpty, NonFiniteLoss, UnknownVariant
from .model import MMFFNet
from .skeleton_io import Manifest, load_manifest

log = logging.getLogger("mmff.training")

STAGE_STREAM, STAGE_FUSION, STAGE_FINETUNE = 1, 2, 3


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


@dataclass
class EpochLog:
    epoch: int
    stage: str
    lr: float
    loss: float
    acc: float

    def line(self) -> str:
        return (f"epoch={self.epoch} stage={self.stage} lr={self.lr:.6g} "
                f"loss={self.loss:.6f} acc={self.acc:.4f}")


def params_digest(params) -> str:
    """SHA-256 over the raw bytes of a parameter list (order-sensitive)."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _fit(params, forward, labels: torch.Tensor, tcfg: TrainConfig, epochs: int, stage: str,
         seed_offset: int, sink=None, lr: float | None = None) -> list[EpochLog]:
    """Adam + step schedule over shuffled mini-batches.

    ``forward(idx)`` maps a LongTensor of sample indices to class scores.
    """
    n = len(labels)
    if n == 0:
        raise DataEmpty(f"{stage}: no training samples")
    params = [p for p in params if p.requires_grad]
    base_lr = tcfg.lr if lr is None else lr
    opt = torch.optim.Adam(params, lr=base_lr, betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.adam_eps,
                           weight_decay=tcfg.weight_decay)
    gen = torch.Generator().manual_seed(tcfg.seed * 1009 + seed_offset)
    history = []
    for epoch in range(epochs):
        lr = tcfg.lr_at(epoch, base_lr)
        for g in opt.param_groups:
            g["lr"] = lr
        order = torch.randperm(n, generator=gen)
        total, correct = 0.0, 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            scores = forward(idx)
            loss = F.cross_entropy(scores, labels[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, "
                                    f"batch starting {start}, lr {lr:g}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((scores.argmax(-1) == labels[idx]).sum())
        entry = EpochLog(epoch, stage, lr, total / n, correct / n)
        history.append(entry)
        log.info(entry.line())
        if sink is not None:
            sink(entry)
    return history


def train_stream(model: MMFFNet, stream: str, data: TensorData, cfg: RunConfig, sink=None):
    """Stage 1 for one stream (with its temporary head)."""
    if stream not in ("skeleton", "rgb"):
        raise ValueError(f"unknown stream {stream!r}")
    model.train()
    params = model.stream_parameters(stream)
    for p in params:
        p.requires_grad_(True)

    def forward(idx):
        return model.stream_scores(stream, data.skeletons[idx], data.images[idx], data.masks[idx])

    return _fit(params, forward, data.labels, cfg.train, cfg.train.epochs_stream,
                f"stream-{stream}", 1 if stream == "skeleton" else 2, sink)


@torch.no_grad()
def stream_feature_cache(model: MMFFNet, data: TensorData, batch: int = 256):
    """Features of the (frozen) streams for every sample."""
    model.eval()
    fs, fr = [], []
    for s in range(0, len(data), batch):
        a, b = model.stream_features(data.skeletons[s:s + batch], data.images[s:s + batch],
                                     data.masks[s:s + batch])
        fs.append(a)
        fr.append(b)
    return torch.cat(fs), torch.cat(fr)


def stream_parameters(model: MMFFNet):
    return list(model.skeleton.parameters()) + list(model.rgb.parameters())


def train_fusion(model: MMFFNet, data: TensorData, cfg: RunConfig, sink=None):
    """Stage 2: stream weights frozen, only the fusion module learns.

    Frozen streams are deterministic functions of their input, so their
    features are computed once and reused every epoch.
    """
    frozen = stream_parameters(model)
    for p in frozen:
        p.requires_grad_(False)
    before = params_digest(frozen)
    f_skel, f_rgb = stream_feature_cache(model, data)
    model.train()
    fusion_params = list(model.fusion.parameters())
    for p in fusion_params:
        p.requires_grad_(True)
    history = _fit(fusion_params, lambda idx: model.fuse(f_skel[idx], f_rgb[idx]), data.labels,
                   cfg.train, cfg.train.epochs_fusion, "fusion", 3, sink)
    if params_digest(frozen) != before:
        raise RuntimeError("stream weights changed while frozen")
    return history


def finetune_all(model: MMFFNet, data: TensorData, cfg: RunConfig, sink=None):
    """Stage 3: streams and fusion trained jointly."""
    params = stream_parameters(model) + list(model.fusion.parameters())
    for p in params:
        p.requires_grad_(True)
    model.train()

    def forward(idx):
        return model(data.skeletons[idx], data.images[idx], data.masks[idx])

    return _fit(params, forward, data.labels, cfg.train, cfg.train.epochs_finetune, "finetune", 4, sink,
                lr=cfg.train.lr * cfg.train.finetune_lr_scale)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray          # (K, K), row = true class
    per_class: np.ndarray          # (K,), NaN for classes without samples
    total: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, pred, labels, num_classes: int) -> "EvalReport":
        pred = np.asarray(pred, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise DataEmpty("cannot evaluate on an empty dataset")
        conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(conf, (labels, pred), 1)
        rows = conf.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_class = np.where(rows > 0, np.diag(conf) / np.maximum(rows, 1), np.nan)
        return cls(int(np.trace(conf)) / int(conf.sum()), conf, per_class, int(conf.sum()))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "total": self.total,
            "correct": int(np.trace(self.confusion)),
            "per_class_accuracy": [None if math.isnan(x) else float(x) for x in self.per_class],
            "confusion": self.confusion.tolist(),
            **self.extra,
        }


@torch.no_grad()
def predict(model: MMFFNet, data: TensorData, head: str = "fusion", batch: int = 256) -> torch.Tensor:
    model.eval()
    out = []
    for s in range(0, len(data), batch):
        sk, im, ma = data.skeletons[s:s + batch], data.images[s:s + batch], data.masks[s:s + batch]
        scores = model(sk, im, ma) if head == "fusion" else model.stream_scores(head, sk, im, ma)
        out.append(scores)
    return torch.cat(out)


def evaluate(model: MMFFNet, data: TensorData, head: str = "fusion") -> EvalReport:
    """Top-1 accuracy and confusion matrix; per-family accuracies go to ``extra``."""
    if len(data) == 0:
        raise DataEmpty("cannot evaluate on an empty dataset")
    pred = predict(model, data, head).argmax(-1).numpy()
    labels = data.labels.numpy()
    rep = EvalReport.from_predictions(pred, labels, data.num_classes or model.num_classes)
    fams = sorted(set(data.families) - {""})
    if fams:
        famarr = np.asarray(data.families)
        rep.extra["family_accuracy"] = {f: float((pred[famarr == f] == labels[famarr == f]).mean())
                                        for f in fams}
    return rep


# --------------------------------------------------------------------------
# Full procedure
# --------------------------------------------------------------------------

def build_model(cfg: RunConfig, num_classes: int) -> MMFFNet:
    set_determinism(cfg.train.seed, cfg.deterministic)
    return MMFFNet(cfg, cfg.model.num_classes or num_classes)


def train_all(cfg: RunConfig, train: TensorData, stages=(1, 2, 3), model: MMFFNet | None = None,
              sink=None, on_stage=None) -> MMFFNet:
    """Run the requested stages in order; ``on_stage(model, stage)`` fires after each."""
    model = model or build_model(cfg, train.num_classes)
    for stage in sorted(stages):
        if stage == STAGE_STREAM:
            train_stream(model, "skeleton", train, cfg, sink)
            train_stream(model, "rgb", train, cfg, sink)
        elif stage == STAGE_FUSION:
            train_fusion(model, train, cfg, sink)
        elif stage == STAGE_FINETUNE:
            finetune_all(model, train, cfg, sink)
        else:
            raise ValueError(f"unknown stage {stage}")
        if on_stage is not None:
            on_stage(model, stage)
    return model


# --------------------------------------------------------------------------
# Ablations
# --------------------------------------------------------------------------

BASE_VARIANTS = ("full", "no_self_attn", "no_skel_attn", "decision", "sum", "lstm", "bilstm",
                 "skeleton_only", "rgb_only", "no_augmentation", "no_projection_crop",
                 "no_enhancement")
FRAME_COUNT_FRACTIONS = {1: (0.5,), 3: (0.3, 0.5, 0.7), 5: (0.3, 0.4, 0.5, 0.6, 0.7)}


def variant_config(name: str, base: RunConfig) -> tuple[RunConfig, str]:
    """Config for an ablation variant and the head to evaluate (fusion/skeleton/rgb)."""
    cfg = copy.deepcopy(base)
    m, a = cfg.model, cfg.augment
    head = "fusion"
    key, _, arg = name.partition("=")
    if arg:
        try:
            if key in ("fraction", "frame_fraction"):
                x = float(arg)
                if not 0 <= x <= 1:
                    raise ValueError
                cfg.frame_fractions = (x,)
            elif key in ("frames", "frame_count"):
                cfg.frame_fractions = FRAME_COUNT_FRACTIONS[int(arg)]
            else:
                raise UnknownVariant(name)
        except (ValueError, KeyError):
            raise UnknownVariant(name) from None
        return cfg, head
    if name == "full":
        pass
    elif name == "no_self_attn":
        m.self_attention = False
    elif name == "no_skel_attn":
        m.skeleton_attention = False
    elif name in ("decision", "sum", "lstm"):
        m.fusion = name
    elif name == "bilstm":
        m.backbone, m.fusion = "bilstm", "lstm"
    elif name == "skeleton_only":
        head = "skeleton"
    elif name == "rgb_only":
        m.skeleton_attention = False
        head = "rgb"
    elif name == "no_augmentation":
        a.data_augmentation = False
    elif name == "no_projection_crop":
        a.projection_crop = False
    elif name == "no_enhancement":
        a.data_augmentation = a.projection_crop = False
    else:
        raise UnknownVariant(name)
    return cfg, head


def _key(*parts) -> str:
    return json.dumps([dataclasses.asdict(p) if dataclasses.is_dataclass(p) else p for p in parts],
                      sort_keys=True, default=list)


def _skeleton_key(cfg: RunConfig) -> str:
    m, a = cfg.model, cfg.augment
    fields = {k: getattr(m, k) for k in ("backbone", "joint_schema", "graph_strategy", "degree_mode",
                                         "seq_len", "pad_len", "gcn_channels", "gcn_strides",
                                         "temporal_kernel", "residual", "lstm_hidden", "lstm_layers",
                                         "va_center")}
    aug = {k: getattr(a, k) for k in ("data_augmentation", "n_rot", "n_scale", "rot_max_deg",
                                      "gamma_max_deg", "scale_range")}
    return _key("skeleton", fields, aug, cfg.train)


def _rgb_key(cfg: RunConfig) -> str:
    m = cfg.model
    fields = {k: getattr(m, k) for k in ("cnn_channels", "cnn_strides", "attn_dim", "self_attention",
                                         "skeleton_attention", "square_frac", "seq_len", "va_center")}
    return _key("rgb", cfg.rgb_mode, fields, cfg.augment, list(cfg.frame_fractions), cfg.train)


def _data_key(cfg: RunConfig, train: bool) -> str:
    m = cfg.model
    return _key("data", train, cfg.augment, list(cfg.frame_fractions),
                [m.seq_len, m.pad_len, m.va_center, m.square_frac, list(m.cnn_channels),
                 list(m.cnn_strides)], cfg.train.seed)


class AblationRunner:
    """Runs variants while sharing preprocessed data and stage-1 streams between them."""

    def __init__(self, dataset: Manifest | str, base: RunConfig, sink=None):
        self.manifest = dataset if isinstance(dataset, Manifest) else load_manifest(dataset)
        self.base = base
        self.sink = sink
        self._data: dict = {}
        self._streams: dict = {}

    def data(self, cfg: RunConfig, train: bool) -> TensorData:
        k = _data_key(cfg, train)
        if k not in self._data:
            self._data[k] = prepare(self.manifest, cfg, "train" if train else "test", train)
        return self._data[k]

    def _stream(self, model: MMFFNet, stream: str, key: str, data: TensorData, cfg: RunConfig):
        mods = (model.skeleton, model.skel_head) if stream == "skeleton" else (model.rgb, model.rgb_head)
        if key in self._streams:
            for mod, state in zip(mods, self._streams[key]):
                mod.load_state_dict(state)
        else:
            train_stream(model, stream, data, cfg, self.sink)
            self._streams[key] = tuple(copy.deepcopy(m.state_dict()) for m in mods)

    def run_variant(self, name: str) -> dict:
        cfg, head = variant_config(name, self.base)
        train, test = self.data(cfg, True), self.data(cfg, False)
        model = build_model(cfg, train.num_classes)
        if head != "rgb":
            self._stream(model, "skeleton", _skeleton_key(cfg), train, cfg)
        if head != "skeleton":
            self._stream(model, "rgb", _rgb_key(cfg), train, cfg)
        stage2 = None
        if head == "fusion":
            train_fusion(model, train, cfg, self.sink)
            stage2 = evaluate(model, test, head).accuracy
            finetune_all(model, train, cfg, self.sink)
        rep = evaluate(model, test, head)
        row = {"variant": name, "accuracy": rep.accuracy, "total": rep.total, "stage2_accuracy": stage2}
        row.update({f"acc_{f}": v for f, v in rep.extra.get("family_accuracy", {}).items()})
        row["report"] = rep
        return row


def run_ablation(dataset: Manifest | str, variants, cfg: RunConfig, sink=None,
                 runner: AblationRunner | None = None) -> list[dict]:
    """One row (variant, accuracy, per-family accuracies, EvalReport) per variant."""
    variants = list(variants)
    for v in variants:
        variant_config(v, cfg)  # fail fast on unknown names
    runner = runner or AblationRunner(dataset, cfg, sink)
    return [runner.run_variant(v) for v in variants]


def ablation_table(rows: list[dict]) -> str:
    """Tab-separated table (header + one line per variant)."""
    cols = ["variant", "accuracy", "total", "stage2_accuracy"]
    for r in rows:
        cols += [k for k in r if k.startswith("acc_") and k not in cols]
    lines = ["\t".join(cols)]
    for r in rows:
        vals = []
        for c in cols:
            v = r.get(c)
            vals.append(f"{v:.6f}" if isinstance(v, float) else "" if v is None else str(v))
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"
