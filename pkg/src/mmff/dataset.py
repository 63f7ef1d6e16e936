"""Turn a manifest dataset into in-memory model tensors.

Per sample: VA-pre normalised, resampled skeleton (3 x T x V); one projection
crop per selected frame fraction (3 x H x W); the matching skeleton-attention
mask on the backbone's feature grid. Training splits are expanded with
rotated/scaled skeleton copies, each paired with its own random crop.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import os

import numpy as np
import torch
from PIL import Image

from .augmentation import (CropTransform, expand_dataset, project_to_image, projection_crop,
                           random_crop, resize_image)
from .config import RunConfig
from .errors import DataEmpty
from .rgb_stream import ConvBackbone, skeleton_attention_mask
from .skeleton_io import (ActionSample, Manifest, load_manifest, load_sample, resample,
                          select_frame, va_pre_normalize)


@dataclass
class TensorData:
    skeletons: torch.Tensor          # (N, 3, T, V)
    images: torch.Tensor             # (N, F, 3, H, W)
    masks: torch.Tensor              # (N, F, 1, h, w)
    labels: torch.Tensor             # (N,)
    families: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)
    num_classes: int = 0

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "TensorData":
        idx = torch.as_tensor(idx, dtype=torch.long)
        il = idx.tolist()
        return TensorData(self.skeletons[idx], self.images[idx], self.masks[idx], self.labels[idx],
                          [self.families[i] for i in il] if self.families else [],
                          [self.sample_ids[i] for i in il] if self.sample_ids else [],
                          self.num_classes)

    def family(self, name: str) -> "TensorData":
        return self.subset([i for i, f in enumerate(self.families) if f == name])


def load_frame(path) -> np.ndarray:
    """8-bit RGB file -> float C x H x W in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.moveaxis(arr, -1, 0)


def center_crop_window(joints2d, margin_w, margin_h, image_w, image_h):
    """Bounding box grown by half the margins on every side (evaluation-time crop)."""
    pts = np.asarray(joints2d).reshape(-1, 2)
    umin, vmin = pts.min(0) - np.array([margin_w, margin_h]) / 2
    umax, vmax = pts.max(0) + np.array([margin_w, margin_h]) / 2
    x0, y0 = max(0, int(np.floor(umin))), max(0, int(np.floor(vmin)))
    x1, y1 = min(image_w, int(np.ceil(umax))), min(image_h, int(np.ceil(vmax)))
    return x0, y0, x1, y1


def crop_frame(image, sample: ActionSample, frame_index: int, cfg: RunConfig, train: bool,
               rng: np.random.Generator):
    aug = cfg.augment
    out = (aug.out_size, aug.out_size)
    C, H, W = image.shape
    if not aug.projection_crop:
        if train:
            return random_crop(image, rng, aug.random_crop_frac, out)
        cw, ch = max(1, round(W * aug.random_crop_frac)), max(1, round(H * aug.random_crop_frac))
        x0, y0 = (W - cw) // 2, (H - ch) // 2
        tf = CropTransform(float(x0), float(y0), float(cw), float(ch), *out)
        return resize_image(image[:, y0:y0 + ch, x0:x0 + cw], *out), tf
    uv = project_to_image(sample.skeleton.joints[frame_index], sample.camera)
    lo, hi = aug.crop_margin_range
    if train:
        corner = aug.crop_corners[int(rng.integers(len(aug.crop_corners)))]
        mw, mh = rng.uniform(lo, hi, size=2)
        return projection_crop(image, uv, mw, mh, corner, out)
    m = 0.5 * (lo + hi)
    x0, y0, x1, y1 = center_crop_window(uv, m, m, W, H)
    tf = CropTransform(float(x0), float(y0), float(x1 - x0), float(y1 - y0), *out)
    return resize_image(image[:, y0:y1, x0:x1], *out), tf


def frame_fraction_indices(T: int, fractions) -> list:
    return [select_frame(T, f).index for f in fractions]


def prepare_sample(sample: ActionSample, cfg: RunConfig, train: bool, rng: np.random.Generator,
                   feat_hw: tuple) -> list:
    """List of (skeleton array, images, masks) tuples: the original plus augmented copies."""
    m, aug = cfg.model, cfg.augment
    raw = sample.skeleton
    seq = va_pre_normalize(raw, m.va_center)
    if m.seq_len:
        seq = resample(seq, m.seq_len, m.pad_len or None)
    copies = [seq]
    if train and aug.data_augmentation:
        copies = expand_dataset([seq], aug.n_rot, aug.n_scale, rng, aug.rot_max_deg,
                                aug.gamma_max_deg, aug.scale_range)
    idx = frame_fraction_indices(raw.frame_count, cfg.frame_fractions)
    frames = {i: load_frame(sample.frame_paths[i]) for i in set(idx)}
    out = []
    # crops are re-drawn per copy when training with projection crop (x4 corner variety)
    for c in copies:
        imgs, masks = [], []
        for i in idx:
            img, tf = crop_frame(frames[i], sample, i, cfg, train, rng)
            imgs.append(img)
            masks.append(skeleton_attention_mask(raw, sample.camera, tf, feat_hw[1], feat_hw[0],
                                                 m.square_frac, mid_index=i))
        out.append((np.moveaxis(c.joints, -1, 0), np.stack(imgs), np.stack(masks)))
    return out


def feature_grid(cfg: RunConfig) -> tuple:
    m = cfg.model
    bb = ConvBackbone(3, m.cnn_channels, m.cnn_strides)
    return bb.output_size(cfg.augment.out_size, cfg.augment.out_size)


def prepare(manifest: Manifest | str, cfg: RunConfig, split: str | None, train: bool,
            seed: int | None = None) -> TensorData:
    """Load, preprocess and stack every sample of ``split``."""
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    entries = manifest.entries(split)
    if not entries:
        raise DataEmpty(f"no samples in split {split!r}")
    seed = cfg.train.seed if seed is None else seed
    feat_hw = feature_grid(cfg)
    sk, im, ma, lab, fam, ids = [], [], [], [], [], []
    for k, e in enumerate(entries):
        rng = np.random.default_rng([seed, k, 1 if train else 0])
        sample = load_sample(manifest, e)
        for s, i, m in prepare_sample(sample, cfg, train, rng, feat_hw):
            sk.append(s)
            im.append(i)
            ma.append(m)
            lab.append(e.label)
            fam.append(e.meta.get("family", ""))
            ids.append(e.sample_id)
    return TensorData(
        torch.tensor(np.ascontiguousarray(np.stack(sk)), dtype=torch.float32),
        torch.tensor(np.stack(im), dtype=torch.float32),
        torch.tensor(np.stack(ma), dtype=torch.float32),
        torch.tensor(lab, dtype=torch.long), fam, ids, len(manifest.classes))
