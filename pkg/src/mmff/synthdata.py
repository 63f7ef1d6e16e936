"""Deterministic stick-figure action clips with paired skeletons and RGB frames.

Three class families make modality complementarity measurable:

* ``A`` - motion only: each class oscillates a different joint, no object.
* ``B`` - appearance only: one shared motion, each class holds a different
  coloured object.
* ``C`` - joint classes built from (motion, object) combinations. With the
  default ``"modular"`` rule the label is ``(motion + object) mod P``, so
  neither modality alone carries any information about it; ``"pairs"`` makes
  every combination its own class.

Oscillations are phase-locked so the moving joint passes its rest position
at the middle frame: the middle RGB frame of every class shows the same pose,
while the joint is displaced by exactly ``amplitude`` from frame 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math
import os
import shutil
import tempfile

import numpy as np
from PIL import Image
from skimage.draw import line_aa

from .augmentation import project_to_image
from .errors import SpecInvalid
from .rgb_stream import rasterize_square
from .skeleton_io import (SCHEMAS, CameraParams, Manifest, ManifestEntry, SkeletonSequence,
                          save_manifest, serialize_ntu_skeleton)

# rest pose of the synth10 schema, camera frame (y points down), metres
REST_POSE = np.array([
    [0.00, 0.00, 0.0],    # torso
    [0.00, -0.60, 0.0],   # head
    [-0.25, -0.30, 0.0],  # l_elbow
    [-0.45, -0.10, 0.0],  # l_hand
    [0.25, -0.30, 0.0],   # r_elbow
    [0.45, -0.10, 0.0],   # r_hand
    [-0.12, 0.40, 0.0],   # l_knee
    [-0.15, 0.80, 0.0],   # l_foot
    [0.12, 0.40, 0.0],    # r_knee
    [0.15, 0.80, 0.0],    # r_foot
])

BACKGROUND = 128
LIMB_COLOR = 235


@dataclass(frozen=True)
class SynthClass:
    name: str
    family: str
    combos: tuple  # ((motion id or -1 for the family-B motion, object id or -1), ...)


@dataclass
class SynthSpec:
    # (joint, axis) per motion pattern used by families A and C
    motions: tuple = ((3, 1), (7, 0), (1, 0))
    # colours (RGB 0-255) per object used by families B and C
    objects: tuple = ((220, 40, 40), (40, 200, 40), (40, 80, 230))
    family_b_motion: tuple = (9, 0)
    object_joint: int = 5
    families: str = "ABC"
    family_c_rule: str = "modular"
    train_per_class: int = 60
    test_per_class: int = 20
    image_size: int = 64
    frame_count: int = 24
    noise: float = 0.005
    amplitude: float = 0.3
    cycles: int = 1
    object_size: float = 5.0
    focal: float = 64.0
    depth_range: tuple = (3.6, 4.4)
    offset_range: tuple = (0.3, 0.2)
    seed: int = 7
    schema: str = "synth10"

    def validate(self) -> "SynthSpec":
        if not self.families or set(self.families) - set("ABC"):
            raise SpecInvalid("families must be a non-empty subset of 'ABC'")
        if self.frame_count < 2:
            raise SpecInvalid("frame_count must be >= 2")
        if self.image_size < 8:
            raise SpecInvalid("image_size must be >= 8")
        if self.train_per_class < 0 or self.test_per_class < 0 or \
                self.train_per_class + self.test_per_class < 1:
            raise SpecInvalid("need at least one sample per class")
        if self.schema != "synth10":
            raise SpecInvalid(f"unsupported schema {self.schema!r}")
        V = SCHEMAS[self.schema].joint_count
        joints = [j for j, _ in self.motions] + [self.family_b_motion[0], self.object_joint]
        if any(not 0 <= j < V for j in joints) or any(not 0 <= a < 3 for _, a in self.motions):
            raise SpecInvalid("motion/object joints out of range")
        if self.object_joint in [j for j, _ in self.motions] + [self.family_b_motion[0]]:
            raise SpecInvalid("the object joint must not be a moving joint")
        if ("A" in self.families or "C" in self.families) and not self.motions:
            raise SpecInvalid("families A/C need motion patterns")
        if ("B" in self.families or "C" in self.families) and not self.objects:
            raise SpecInvalid("families B/C need objects")
        if self.family_c_rule not in ("modular", "pairs"):
            raise SpecInvalid(f"unknown family C rule {self.family_c_rule!r}")
        if self.noise < 0 or self.amplitude <= 0:
            raise SpecInvalid("noise must be >= 0 and amplitude > 0")
        return self

    def classes(self) -> list[SynthClass]:
        out = []
        M, P = len(self.motions), len(self.objects)
        if "A" in self.families:
            out += [SynthClass(f"A_motion{m}", "A", ((m, -1),)) for m in range(M)]
        if "B" in self.families:
            out += [SynthClass(f"B_object{o}", "B", ((-1, o),)) for o in range(P)]
        if "C" in self.families:
            if self.family_c_rule == "pairs":
                out += [SynthClass(f"C_m{m}_o{o}", "C", ((m, o),)) for m in range(M) for o in range(P)]
            else:
                for k in range(P):
                    combos = tuple((m, o) for m in range(M) for o in range(P) if (m + o) % P == k)
                    out.append(SynthClass(f"C_sum{k}", "C", combos))
        return out

    def camera(self) -> CameraParams:
        s = self.image_size
        return CameraParams(self.focal, self.focal, s / 2.0, s / 2.0, s, s)


def motion_displacement(T: int, amplitude: float, cycles: int = 1) -> np.ndarray:
    """Sinusoid equal to -amplitude at frame 0 and 0 at the middle frame."""
    t = np.arange(T, dtype=np.float64)
    t_ref = (T - 1) // 2
    if t_ref == 0:
        return np.where(t == 0, -amplitude, 0.0) if T > 1 else np.zeros(T)
    period = 4.0 * t_ref / (4 * cycles + 1)
    return amplitude * np.sin(2.0 * math.pi * (t - t_ref) / period)


def clean_trajectory(spec: SynthSpec, motion: tuple, offset: np.ndarray) -> np.ndarray:
    """Noise-free T x N x 3 camera-frame trajectory."""
    T = spec.frame_count
    joints = np.repeat((REST_POSE + offset)[None], T, axis=0)
    joint, axis = motion
    joints[:, joint, axis] += motion_displacement(T, spec.amplitude, spec.cycles)
    return joints


def render_frame(joints: np.ndarray, camera: CameraParams, edges, object_joint: int | None = None,
                 color=None, image_size: int | None = None, object_size: float = 5.0) -> np.ndarray:
    """Render one H x W x 3 uint8 frame: grey background, anti-aliased limbs, object square."""
    W = image_size or camera.image_w
    H = image_size or camera.image_h
    img = np.full((H, W, 3), float(BACKGROUND))
    uv = project_to_image(joints, camera)
    for a, b in edges:
        c0, r0 = (int(round(x)) for x in uv[a])
        c1, r1 = (int(round(x)) for x in uv[b])
        rr, cc, val = line_aa(r0, c0, r1, c1)
        keep = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        rr, cc, val = rr[keep], cc[keep], val[keep][:, None]
        img[rr, cc] = img[rr, cc] * (1.0 - val) + LIMB_COLOR * val
    if object_joint is not None and color is not None:
        m = rasterize_square(uv[object_joint], object_size, W, H).astype(bool)
        img[m] = np.asarray(color, dtype=np.float64)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _sample_plan(spec: SynthSpec):
    """Deterministic list of (sample_index, class_index, combo, split)."""
    plan, idx = [], 0
    for ci, cls in enumerate(spec.classes()):
        for split, n in (("train", spec.train_per_class), ("test", spec.test_per_class)):
            for k in range(n):
                plan.append((idx, ci, cls.combos[k % len(cls.combos)], split))
                idx += 1
    return plan


def make_sample(spec: SynthSpec, index: int, combo: tuple):
    """Skeleton (noisy), clean trajectory and ground-truth metadata for one sample."""
    rng = np.random.default_rng([spec.seed, index])
    m, o = combo
    motion = spec.family_b_motion if m < 0 else spec.motions[m]
    ox, oy = spec.offset_range
    offset = np.array([rng.uniform(-ox, ox), rng.uniform(-oy, oy), rng.uniform(*spec.depth_range)])
    clean = clean_trajectory(spec, tuple(motion), offset)
    noisy = clean + rng.normal(0.0, spec.noise, size=clean.shape) if spec.noise > 0 else clean.copy()
    meta = {
        "motion": int(m), "object": int(o),
        "moving_joint": int(motion[0]),
        "object_joint": int(spec.object_joint) if o >= 0 else -1,
        "object_color": list(spec.objects[o]) if o >= 0 else None,
    }
    return noisy, clean, meta


def generate_dataset(spec: SynthSpec, root) -> str:
    """Write ``manifest.json``, ``skeletons/<id>.skeleton`` and ``frames/<id>/<t>.png`` under ``root``.

    Output is assembled in a temporary sibling directory and moved into place,
    so a failure never leaves a partial dataset behind.
    """
    spec.validate()
    root = os.path.abspath(os.fspath(root))
    parent = os.path.dirname(root) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".synth-", dir=parent)
    try:
        _write(spec, tmp)
        if os.path.exists(root):
            shutil.rmtree(root)
        os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return root


def _write(spec: SynthSpec, out: str) -> None:
    schema = SCHEMAS[spec.schema]
    cam = spec.camera()
    classes = spec.classes()
    os.makedirs(os.path.join(out, "skeletons"))
    os.makedirs(os.path.join(out, "frames"))
    entries = []
    for index, ci, combo, split in _sample_plan(spec):
        sid = f"s{index:05d}"
        noisy, clean, meta = make_sample(spec, index, combo)
        meta["family"] = classes[ci].family
        with open(os.path.join(out, "skeletons", f"{sid}.skeleton"), "w") as fh:
            fh.write(serialize_ntu_skeleton(SkeletonSequence(noisy, body_id=sid)))
        fdir = os.path.join(out, "frames", sid)
        os.makedirs(fdir)
        obj = meta["object"]
        color = spec.objects[obj] if obj >= 0 else None
        for t in range(spec.frame_count):
            img = render_frame(clean[t], cam, schema.edges, spec.object_joint if obj >= 0 else None,
                               color, spec.image_size, spec.object_size)
            Image.fromarray(img).save(os.path.join(fdir, f"{t:04d}.png"), compress_level=1)
        entries.append(ManifestEntry(f"skeletons/{sid}.skeleton", f"frames/{sid}", ci, cam,
                                     sample_id=sid, split=split, meta=meta))
    save_manifest(Manifest(entries, [c.name for c in classes]), os.path.join(out, "manifest.json"))
