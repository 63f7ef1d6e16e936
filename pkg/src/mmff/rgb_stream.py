"""RGB stream: small CNN backbone, self-attention and skeleton attention."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .augmentation import CropTransform, project_to_image
from .errors import ShapeMismatch
from .skeleton_io import CameraParams, SkeletonSequence


class ConvBackbone(nn.Module):
    """Stacked conv (+ BN) + ReLU stages standing in for the large image backbone."""

    def __init__(self, in_channels=3, channels=(16, 32), strides=(2, 2), kernel=3, batch_norm=False):
        super().__init__()
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have equal length")
        layers, c = [], in_channels
        for co, s in zip(channels, strides):
            layers.append(nn.Conv2d(c, co, kernel, stride=s, padding=kernel // 2))
            if batch_norm:
                layers.append(nn.BatchNorm2d(co))
            layers.append(nn.ReLU())
            c = co
        self.body = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.out_channels = c
        self.strides = tuple(strides)
        self.kernel = kernel

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        p = self.kernel // 2
        for s in self.strides:
            h = (h + 2 * p - self.kernel) // s + 1
            w = (w + 2 * p - self.kernel) // s + 1
        return h, w

    def forward(self, image):
        if image.shape[-3] != self.in_channels:
            raise ShapeMismatch(f"expected {self.in_channels} input channels, got {image.shape[-3]}")
        return self.body(image)


def backbone_forward(image: torch.Tensor, backbone: ConvBackbone) -> torch.Tensor:
    squeeze = image.dim() == 3
    out = backbone(image.unsqueeze(0) if squeeze else image)
    return out.squeeze(0) if squeeze else out


# --------------------------------------------------------------------------
# Self-attention
# --------------------------------------------------------------------------

def self_attention(F_in: torch.Tensor, conv_weight: torch.Tensor, conv_bias: torch.Tensor | None = None):
    """Sigmoid mask from a 1x1 conv, multiplied into the feature map.

    F_in: (B, C, H, W) or (C, H, W); conv_weight: (1, C, 1, 1) or (C,).
    Returns ``(F_self, M_self)`` with ``M_self`` of shape (B, 1, H, W).
    """
    squeeze = F_in.dim() == 3
    x = F_in.unsqueeze(0) if squeeze else F_in
    w = conv_weight.reshape(1, -1, 1, 1)
    if w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv expects {w.shape[1]} channels, feature has {x.shape[1]}")
    mask = torch.sigmoid(F.conv2d(x, w, conv_bias))
    out = mask * x
    if squeeze:
        return out.squeeze(0), mask.squeeze(0)
    return out, mask


class SelfAttention(nn.Module):
    """Independent attention branches, each pooled (GAP) and projected to ``dim``."""

    def __init__(self, channels: int, dim: int = 256, branches: int = 2):
        super().__init__()
        self.masks = nn.ModuleList(nn.Conv2d(channels, 1, 1) for _ in range(branches))
        self.proj = nn.ModuleList(nn.Linear(channels, dim) for _ in range(branches))

    def forward(self, F_in, enabled: bool = True):
        maps, masks, vecs = [], [], []
        for conv, lin in zip(self.masks, self.proj):
            if enabled:
                f, m = self_attention(F_in, conv.weight, conv.bias)
            else:
                f, m = F_in, torch.ones_like(F_in[:, :1])
            maps.append(f)
            masks.append(m)
            vecs.append(lin(f.mean(dim=(2, 3))))
        return maps, masks, vecs


# --------------------------------------------------------------------------
# Skeleton attention
# --------------------------------------------------------------------------

def max_moving_joint(seq, mid_index: int) -> tuple[int, float]:
    """Joint with the largest displacement between frame 1 and ``mid_index``.

    Ties resolve to the lowest joint index.
    """
    joints = seq.joints if isinstance(seq, SkeletonSequence) else np.asarray(seq)
    if not 0 <= mid_index < joints.shape[0]:
        raise IndexError(f"mid_index {mid_index} outside [0, {joints.shape[0]})")
    d = np.linalg.norm(joints[0] - joints[mid_index], axis=-1)
    j = int(np.argmax(d))
    return j, float(d[j])


def rasterize_square(center_uv, side: float, out_w: int, out_h: int) -> np.ndarray:
    """Binary (out_h, out_w) mask of pixels whose centres lie in the axis-aligned square.

    A square too small to contain any pixel centre marks the single pixel
    containing ``center_uv`` (if it is inside the image).
    """
    u, v = float(center_uv[0]), float(center_uv[1])
    half = side / 2.0
    cols = np.arange(out_w) + 0.5
    rows = np.arange(out_h) + 0.5
    in_c = np.abs(cols - u) <= half
    in_r = np.abs(rows - v) <= half
    mask = (in_r[:, None] & in_c[None, :]).astype(np.float64)
    if not mask.any():
        c, r = int(math.floor(u)), int(math.floor(v))
        if 0 <= c < out_w and 0 <= r < out_h:
            mask[r, c] = 1.0
    return mask


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of fractional overlaps divided by output cell width."""
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    W = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges_out[i], edges_out[i + 1]
        for p in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            W[i, p] = max(0.0, min(hi, p + 1) - max(lo, p))
        W[i] /= hi - lo
    return W


def area_resize(mask: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Exact area-average resampling of a 2-D array."""
    h, w = mask.shape
    return _area_weights(h, out_h) @ mask @ _area_weights(w, out_w).T


def skeleton_attention_mask(seq: SkeletonSequence, camera: CameraParams, crop: CropTransform,
                            feat_w: int, feat_h: int, square_frac: float = 0.25,
                            mid_index: int | None = None, return_full: bool = False):
    """Skeleton-attention mask (1, feat_h, feat_w) for one frame.

    The joint with the largest displacement between frame 1 and ``mid_index``
    (default: middle frame) is projected through the camera and the crop
    transform; a square of side ``square_frac * min(out_w, out_h)`` around it
    is rasterised at crop resolution and area-averaged down to the feature
    grid. Joints must be in camera coordinates (not normalised).
    """
    if mid_index is None:
        mid_index = (seq.frame_count - 1) // 2
    j, _ = max_moving_joint(seq, mid_index)
    uv = project_to_image(seq.joints[mid_index, j], camera)
    uv_crop = crop.apply(uv)
    side = square_frac * min(crop.out_w, crop.out_h)
    full = rasterize_square(uv_crop, side, crop.out_w, crop.out_h)
    mask = area_resize(full, feat_w, feat_h)[None]
    if return_full:
        return mask, full
    return mask


def skeleton_attention(F_in: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if F_in.shape[-2:] != mask.shape[-2:]:
        raise ShapeMismatch(f"mask {tuple(mask.shape[-2:])} vs feature {tuple(F_in.shape[-2:])}")
    return mask * F_in


def rgb_feature(self_parts, ske_part, mode: str):
    """Combine attention outputs into the RGB stream feature.

    ``lstm``: ``self_parts`` are per-branch (B, D) vectors and ``ske_part`` a
    (B, D) vector; result is their concatenation (B, 3D).
    ``gcn``: ``self_parts`` are (B, C, H, W) maps (averaged into one) and
    ``ske_part`` a map; result is their mean flattened to (B, C, H*W).
    """
    if mode == "lstm":
        parts = list(self_parts) + [ske_part]
        if len({p.shape[-1] for p in parts}) != 1:
            raise ShapeMismatch("attention vectors must share their dimension")
        return torch.cat(parts, dim=-1)
    if mode == "gcn":
        f_self = torch.stack(list(self_parts)).mean(dim=0)
        if f_self.shape != ske_part.shape:
            raise ShapeMismatch(f"{tuple(f_self.shape)} vs {tuple(ske_part.shape)}")
        avg = 0.5 * (f_self + ske_part)
        return avg.flatten(start_dim=-2)
    raise ValueError(f"unknown mode {mode!r}")


class RGBStream(nn.Module):
    """Backbone + self/skeleton attention producing the RGB feature.

    Inputs are images (B, F, 3, H, W) and precomputed skeleton masks
    (B, F, 1, H', W'); per-frame features are averaged over F.
    """

    def __init__(self, mode="gcn", channels=(16, 32), strides=(2, 2), kernel=3, attn_dim=256,
                 self_attention=True, skeleton_attention=True, branches=2, batch_norm=False):
        super().__init__()
        if mode not in ("gcn", "lstm"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.backbone = ConvBackbone(3, channels, strides, kernel, batch_norm)
        C = self.backbone.out_channels
        self.attention = SelfAttention(C, attn_dim, branches)
        self.ske_proj = nn.Linear(C, attn_dim) if mode == "lstm" else None
        self.use_self = self_attention
        self.use_ske = skeleton_attention
        self.out_channels = C if mode == "gcn" else attn_dim * (branches + 1)

    def frame_details(self, image, mask):
        F_in = self.backbone(image)
        maps, self_masks, vecs = self.attention(F_in, self.use_self)
        if self.use_ske:
            F_ske = skeleton_attention(F_in, mask)
        else:
            F_ske = F_in
        if self.mode == "lstm":
            ske_vec = self.ske_proj(F_ske.amax(dim=(2, 3)))
            feat = rgb_feature(vecs, ske_vec, "lstm")
        else:
            feat = rgb_feature(maps, F_ske, "gcn")
        return feat, {"feature_map": F_in, "self_masks": self_masks, "skeleton_mask": mask}

    def forward(self, images, masks):
        if images.dim() == 4:
            images, masks = images.unsqueeze(1), masks.unsqueeze(1)
        B, Fn = images.shape[:2]
        feats = []
        for k in range(Fn):
            f, _ = self.frame_details(images[:, k], masks[:, k])
            feats.append(f)
        return torch.stack(feats).mean(dim=0) if Fn > 1 else feats[0]

    def pool(self, feat):
        return feat.mean(dim=-1) if feat.dim() == 3 else feat
