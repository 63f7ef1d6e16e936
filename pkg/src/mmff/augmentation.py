"""Geometric data enhancement: skeleton rotation/scaling and projection crop.

The RGB frame is cropped around the image projection of the skeleton; the
returned :class:`CropTransform` maps source pixels to crop pixels so the
skeleton-attention mask can be placed in the same coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
import math

import numpy as np
from skimage.transform import resize as _sk_resize

from .errors import BehindCamera, EmptyBox
from .skeleton_io import ActionSample, CameraParams, SkeletonSequence

CORNERS = ("TL", "TR", "BL", "BR")


@dataclass(frozen=True)
class RotationSpec:
    """Rotation angles in degrees about x (alpha), y (beta) and z (gamma)."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0


@dataclass(frozen=True)
class ScaleSpec:
    sx: float = 1.0
    sy: float = 1.0
    sz: float = 1.0

    def __post_init__(self):
        if min(self.sx, self.sy, self.sz) <= 0:
            raise ValueError("scale factors must be positive")


@dataclass(frozen=True)
class CropTransform:
    """Affine map from source-image pixels to resized-crop pixels."""

    origin_x: float
    origin_y: float
    crop_w: float
    crop_h: float
    out_w: int
    out_h: int

    def __post_init__(self):
        if self.crop_w <= 0 or self.crop_h <= 0:
            raise EmptyBox("crop window has zero area")

    @property
    def scale(self) -> tuple[float, float]:
        return self.out_w / self.crop_w, self.out_h / self.crop_h

    def apply(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        sx, sy = self.scale
        return np.stack([(uv[..., 0] - self.origin_x) * sx, (uv[..., 1] - self.origin_y) * sy], axis=-1)

    def inverse(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        sx, sy = self.scale
        return np.stack([uv[..., 0] / sx + self.origin_x, uv[..., 1] / sy + self.origin_y], axis=-1)

    @classmethod
    def identity(cls, w: int, h: int) -> "CropTransform":
        return cls(0.0, 0.0, float(w), float(h), int(w), int(h))


# --------------------------------------------------------------------------
# Skeleton augmentation
# --------------------------------------------------------------------------

def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(g):
    c, s = math.cos(g), math.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(spec: RotationSpec) -> np.ndarray:
    """R = Rz(gamma) @ Ry(beta) @ Rx(alpha), angles in degrees."""
    a, b, g = (math.radians(v) for v in (spec.alpha, spec.beta, spec.gamma))
    if not all(math.isfinite(v) for v in (a, b, g)):
        raise ValueError("rotation angles must be finite")
    return _rz(g) @ _ry(b) @ _rx(a)


def scale_matrix(spec: ScaleSpec) -> np.ndarray:
    return np.diag([spec.sx, spec.sy, spec.sz]).astype(np.float64)


def augment_rotate(seq: SkeletonSequence, spec: RotationSpec) -> SkeletonSequence:
    R = rotation_matrix(spec)
    return seq.replace_joints(seq.joints @ R.T, keep_color=False)


def augment_scale(seq: SkeletonSequence, spec: ScaleSpec) -> SkeletonSequence:
    return seq.replace_joints(seq.joints * np.array([spec.sx, spec.sy, spec.sz]), keep_color=False)


def sample_rotation(rng: np.random.Generator, max_deg: float = 30.0, gamma_max_deg: float = 0.0) -> RotationSpec:
    a, b = rng.uniform(0.0, max_deg, size=2)
    g = rng.uniform(0.0, gamma_max_deg) if gamma_max_deg > 0 else 0.0
    return RotationSpec(float(a), float(b), float(g))


def sample_scale(rng: np.random.Generator, scale_range=(1.0, 1.2), sz: float = 1.0) -> ScaleSpec:
    sx, sy = rng.uniform(scale_range[0], scale_range[1], size=2)
    return ScaleSpec(float(sx), float(sy), float(sz))


def _with_skeleton(item, skel, tag):
    if isinstance(item, SkeletonSequence):
        return skel
    if isinstance(item, ActionSample):
        meta = dict(item.meta)
        meta["augment"] = tag
        return replace(item, skeleton=skel, meta=meta)
    raise TypeError(f"cannot augment {type(item).__name__}")


def expand_dataset(samples, n_rot: int = 2, n_scale: int = 2, rng: np.random.Generator | None = None,
                   rot_max_deg: float = 30.0, gamma_max_deg: float = 0.0,
                   scale_range=(1.0, 1.2), sz: float = 1.0) -> list:
    """Originals followed by ``n_rot`` rotated and ``n_scale`` scaled copies of each.

    Items may be :class:`SkeletonSequence` or :class:`ActionSample`; only the
    skeleton is transformed, the RGB frame references are shared.
    """
    if n_rot < 0 or n_scale < 0:
        raise ValueError("copy counts must be non-negative")
    rng = np.random.default_rng(0) if rng is None else rng
    out = list(samples)
    for item in samples:
        skel = item if isinstance(item, SkeletonSequence) else item.skeleton
        for _ in range(n_rot):
            spec = sample_rotation(rng, rot_max_deg, gamma_max_deg)
            out.append(_with_skeleton(item, augment_rotate(skel, spec), ("rot", spec)))
        for _ in range(n_scale):
            spec = sample_scale(rng, scale_range, sz)
            out.append(_with_skeleton(item, augment_scale(skel, spec), ("scale", spec)))
    return out


# --------------------------------------------------------------------------
# Projection and crop
# --------------------------------------------------------------------------

def project_to_image(joints: np.ndarray, camera: CameraParams) -> np.ndarray:
    """Pinhole projection of ``(..., 3)`` camera-frame points to ``(..., 2)`` pixels."""
    p = np.asarray(joints, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("joint at or behind the camera plane (z <= 0)")
    u = camera.fx * p[..., 0] / z + camera.cx
    v = camera.fy * p[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def crop_window(joints2d: np.ndarray, margin_w: float, margin_h: float, corner: str,
                image_w: int, image_h: int) -> tuple[int, int, int, int]:
    """Integer crop window ``(x0, y0, x1, y1)`` anchored at a bounding-box corner, clamped to the image."""
    if corner not in CORNERS:
        raise ValueError(f"corner must be one of {CORNERS}")
    pts = np.asarray(joints2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyBox("no joints to bound")
    if margin_w < 0 or margin_h < 0:
        raise ValueError("margins must be non-negative")
    umin, vmin = pts.min(axis=0)
    umax, vmax = pts.max(axis=0)
    ww, wh = (umax - umin) + margin_w, (vmax - vmin) + margin_h
    if ww <= 0 or wh <= 0:
        raise EmptyBox("degenerate bounding box with zero margins")
    ox = umin if corner in ("TL", "BL") else umax - ww
    oy = vmin if corner in ("TL", "TR") else vmax - wh
    x0 = max(0, int(math.floor(ox)))
    y0 = max(0, int(math.floor(oy)))
    x1 = min(image_w, int(math.ceil(ox + ww)))
    y1 = min(image_h, int(math.ceil(oy + wh)))
    if x1 <= x0 or y1 <= y0:
        raise EmptyBox("crop window lies outside the image")
    return x0, y0, x1, y1


def resize_image(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear (anti-aliased when shrinking) resize of a C x H x W array."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[1:] == (out_h, out_w):
        return img.copy()
    hwc = np.moveaxis(img, 0, -1)
    shrink = out_h < img.shape[1] or out_w < img.shape[2]
    res = _sk_resize(hwc, (out_h, out_w), order=1, mode="edge", anti_aliasing=shrink,
                     preserve_range=True)
    return np.moveaxis(res, -1, 0)


def projection_crop(image: np.ndarray, joints2d: np.ndarray, margin_w: float, margin_h: float,
                    corner: str = "TL", out_size=(299, 299)) -> tuple[np.ndarray, CropTransform]:
    """Crop a C x H x W frame around the projected skeleton and resize it.

    The window is the joints' bounding box enlarged by the margins, with the
    named box corner kept fixed, and intersected with the image bounds.
    """
    C, H, W = np.shape(image)
    x0, y0, x1, y1 = crop_window(joints2d, margin_w, margin_h, corner, W, H)
    out_w, out_h = out_size
    tf = CropTransform(float(x0), float(y0), float(x1 - x0), float(y1 - y0), int(out_w), int(out_h))
    crop = np.asarray(image)[:, y0:y1, x0:x1]
    return resize_image(crop, out_w, out_h), tf


def random_crop(image: np.ndarray, rng: np.random.Generator, frac: float = 0.875,
                out_size=(299, 299)) -> tuple[np.ndarray, CropTransform]:
    """Skeleton-agnostic random crop of ``frac`` of each side, for the no-projection-crop ablation."""
    C, H, W = np.shape(image)
    cw, ch = max(1, int(round(W * frac))), max(1, int(round(H * frac)))
    x0 = int(rng.integers(0, W - cw + 1))
    y0 = int(rng.integers(0, H - ch + 1))
    out_w, out_h = out_size
    tf = CropTransform(float(x0), float(y0), float(cw), float(ch), int(out_w), int(out_h))
    return resize_image(np.asarray(image)[:, y0:y0 + ch, x0:x0 + cw], out_w, out_h), tf
