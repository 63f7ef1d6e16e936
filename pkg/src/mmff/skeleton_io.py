"""Skeleton data model, NTU text-format parsing, and temporal preprocessing.

Coordinates are metres in the camera frame. A :class:`SkeletonSequence`
holds one tracked body; multi-body files parse into one sequence per body.
"""
from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidTarget, MalformedFile

__all__ = [
    "CameraParams",
    "SkeletonSequence",
    "ActionSample",
    "FrameRef",
    "JointSchema",
    "SCHEMAS",
    "parse_ntu_skeleton",
    "read_ntu_skeleton",
    "serialize_ntu_skeleton",
    "va_pre_normalize",
    "resample",
    "select_frame",
    "Manifest",
    "ManifestEntry",
    "load_manifest",
    "save_manifest",
    "load_sample",
]

BODY_INFO_TOKENS = 10
JOINT_TOKENS = 12


@dataclass(frozen=True)
class CameraParams:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.image_w and 0 <= self.cy <= self.image_h):
            raise ValueError("principal point must lie inside the sensor")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "image_w", "image_h")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["image_w"]), int(d["image_h"]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SkeletonSequence:
    """T x N x 3 joint trajectory of a single body.

    ``color_xy`` optionally keeps the per-joint RGB-image coordinates shipped
    with NTU files (T x N x 2).
    """

    joints: np.ndarray
    body_count: int = 1
    body_id: str = "0"
    color_xy: np.ndarray | None = None

    def __post_init__(self):
        j = _frozen(self.joints)
        if j.ndim != 3 or j.shape[2] != 3:
            raise ValueError(f"joints must be T x N x 3, got {j.shape}")
        if j.shape[0] < 1 or j.shape[1] < 1:
            raise ValueError("need at least one frame and one joint")
        if not np.all(np.isfinite(j)):
            raise ValueError("joints contain NaN/Inf")
        if self.body_count < 1:
            raise ValueError("body_count must be positive")
        object.__setattr__(self, "joints", j)
        if self.color_xy is not None:
            c = _frozen(self.color_xy)
            if c.shape != j.shape[:2] + (2,):
                raise ValueError("color_xy must be T x N x 2")
            object.__setattr__(self, "color_xy", c)

    @property
    def frame_count(self) -> int:
        return self.joints.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joints.shape[1]

    def replace_joints(self, joints: np.ndarray, keep_color: bool = True) -> "SkeletonSequence":
        color = self.color_xy if keep_color and self.color_xy is not None \
            and self.color_xy.shape[:2] == np.shape(joints)[:2] else None
        return SkeletonSequence(joints, self.body_count, self.body_id, color)


@dataclass(frozen=True)
class FrameRef:
    index: int
    fraction: float


@dataclass(frozen=True, eq=False)
class ActionSample:
    skeleton: SkeletonSequence
    frame_paths: tuple
    label: int
    camera: CameraParams
    sample_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frame_paths", tuple(self.frame_paths))
        if len(self.frame_paths) != self.skeleton.frame_count:
            raise ValueError(
                f"{len(self.frame_paths)} frames for a {self.skeleton.frame_count}-frame skeleton")
        if self.label < 0:
            raise ValueError("label must be non-negative")


@dataclass(frozen=True)
class JointSchema:
    name: str
    joint_names: tuple
    edges: tuple
    center: int

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)


_NTU_EDGES_1 = [(1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
                (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14),
                (16, 15), (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8),
                (24, 25), (25, 12)]

SCHEMAS = {
    "ntu25": JointSchema(
        "ntu25",
        tuple(f"j{i}" for i in range(25)),
        tuple((a - 1, b - 1) for a, b in _NTU_EDGES_1),
        center=20,
    ),
    "synth10": JointSchema(
        "synth10",
        ("torso", "head", "l_elbow", "l_hand", "r_elbow", "r_hand",
         "l_knee", "l_foot", "r_knee", "r_foot"),
        ((0, 1), (0, 2), (2, 3), (0, 4), (4, 5), (0, 6), (6, 7), (0, 8), (8, 9)),
        center=0,
    ),
}


# --------------------------------------------------------------------------
# NTU text format
# --------------------------------------------------------------------------

class _Lines:
    def __init__(self, text):
        if isinstance(text, str):
            text = io.StringIO(text)
        self._it = iter(text)
        self.lineno = 0

    def next_tokens(self, what):
        for raw in self._it:
            self.lineno += 1
            toks = raw.split()
            if toks:
                return toks
        raise MalformedFile(f"unexpected end of file while reading {what}", self.lineno + 1)

    def trailing(self):
        for raw in self._it:
            self.lineno += 1
            if raw.strip():
                return self.lineno
        return None


def _int_token(toks, lines, what):
    if len(toks) != 1:
        raise MalformedFile(f"expected a single {what}, got {len(toks)} tokens", lines.lineno)
    try:
        v = int(toks[0])
    except ValueError:
        raise MalformedFile(f"non-integer {what} {toks[0]!r}", lines.lineno) from None
    if v < 0:
        raise MalformedFile(f"negative {what}", lines.lineno)
    return v


def parse_ntu_skeleton(text) -> list[SkeletonSequence]:
    """Parse an NTU RGB+D ``.skeleton`` text stream.

    ``text`` may be a string or any iterable of lines. Returns one
    :class:`SkeletonSequence` per body id, in order of first appearance,
    holding only the frames in which that body is present.
    """
    lines = _Lines(text)
    n_frames = _int_token(lines.next_tokens("frame count"), lines, "frame count")
    bodies: dict[str, dict] = {}
    max_bodies = 0
    n_joints_seen = None
    for _ in range(n_frames):
        n_bodies = _int_token(lines.next_tokens("body count"), lines, "body count")
        max_bodies = max(max_bodies, n_bodies)
        for _ in range(n_bodies):
            info = lines.next_tokens("body info")
            if len(info) != BODY_INFO_TOKENS:
                raise MalformedFile(
                    f"body info line has {len(info)} tokens, expected {BODY_INFO_TOKENS}",
                    lines.lineno)
            body_id = info[0]
            n_joints = _int_token(lines.next_tokens("joint count"), lines, "joint count")
            if n_joints == 0:
                raise MalformedFile("body with zero joints", lines.lineno)
            if n_joints_seen is None:
                n_joints_seen = n_joints
            elif n_joints != n_joints_seen:
                raise MalformedFile(
                    f"joint count {n_joints} differs from earlier {n_joints_seen}", lines.lineno)
            xyz = np.empty((n_joints, 3))
            cxy = np.empty((n_joints, 2))
            for j in range(n_joints):
                toks = lines.next_tokens("joint")
                if len(toks) != JOINT_TOKENS:
                    raise MalformedFile(
                        f"joint line has {len(toks)} tokens, expected {JOINT_TOKENS}", lines.lineno)
                try:
                    vals = [float(t) for t in toks]
                except ValueError:
                    raise MalformedFile(f"non-numeric token in joint line", lines.lineno) from None
                if not all(math.isfinite(v) for v in vals[:7]):
                    raise MalformedFile("non-finite joint coordinate", lines.lineno)
                xyz[j] = vals[0:3]
                cxy[j] = vals[5:7]
            rec = bodies.setdefault(body_id, {"xyz": [], "cxy": []})
            rec["xyz"].append(xyz)
            rec["cxy"].append(cxy)
    extra = lines.trailing()
    if extra is not None:
        raise MalformedFile(f"content beyond the declared {n_frames} frames", extra)
    return [
        SkeletonSequence(np.stack(r["xyz"]), body_count=max(max_bodies, 1), body_id=bid,
                         color_xy=np.stack(r["cxy"]))
        for bid, r in bodies.items()
    ]


def read_ntu_skeleton(path) -> list[SkeletonSequence]:
    with open(path, "r") as fh:
        return parse_ntu_skeleton(fh)


def serialize_ntu_skeleton(seqs: Sequence[SkeletonSequence] | SkeletonSequence) -> str:
    """Write sequences (all with the same frame count) in NTU text layout.

    Floats use ``repr`` so that parsing the result reproduces the joints
    bit-exactly. Fields the data model does not carry are written as zeros.
    """
    if isinstance(seqs, SkeletonSequence):
        seqs = [seqs]
    if not seqs:
        raise ValueError("nothing to serialize")
    T = seqs[0].frame_count
    if any(s.frame_count != T for s in seqs):
        raise ValueError("all bodies must share the frame count")
    out = [f"{T}\n"]
    for t in range(T):
        out.append(f"{len(seqs)}\n")
        for s in seqs:
            out.append(f"{s.body_id} 0 0 0 0 0 0 0 0 2\n")
            out.append(f"{s.joint_count}\n")
            for j in range(s.joint_count):
                x, y, z = (repr(float(v)) for v in s.joints[t, j])
                if s.color_xy is not None:
                    cx, cy = (repr(float(v)) for v in s.color_xy[t, j])
                else:
                    cx = cy = "0"
                out.append(f"{x} {y} {z} 0 0 {cx} {cy} 0 0 0 0 2\n")
    return "".join(out)


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------

def va_pre_normalize(seq: SkeletonSequence, center: str = "mean", root_joint: int = 0) -> SkeletonSequence:
    """Translate every frame so the first frame's body centre is the origin.

    ``center="mean"`` uses the mean of all joints of frame 1;
    ``center="root"`` uses ``root_joint`` of frame 1 instead.
    """
    if center == "mean":
        origin = seq.joints[0].mean(axis=0)
    elif center == "root":
        origin = seq.joints[0, root_joint]
    else:
        raise ValueError(f"unknown centre mode {center!r}")
    return seq.replace_joints(seq.joints - origin)


def resample_indices(T: int, target_T: int) -> np.ndarray:
    if target_T < 1:
        raise InvalidTarget("target_T must be >= 1")
    if target_T > T:
        raise InvalidTarget(f"cannot resample {T} frames up to {target_T}")
    if target_T == 1:
        return np.zeros(1, dtype=np.int64)
    k = np.arange(target_T, dtype=np.int64)
    return (k * (T - 1)) // (target_T - 1)


def resample(seq: SkeletonSequence, target_T: int, pad_T: int | None = None) -> SkeletonSequence:
    """Uniform-stride subsample to ``target_T`` frames, then zero-pad to ``pad_T``."""
    if pad_T is not None and pad_T < target_T:
        raise InvalidTarget("pad_T must be >= target_T")
    idx = resample_indices(seq.frame_count, target_T)
    joints = seq.joints[idx]
    color = seq.color_xy[idx] if seq.color_xy is not None else None
    if pad_T is not None and pad_T > target_T:
        pad = np.zeros((pad_T - target_T,) + joints.shape[1:])
        joints = np.concatenate([joints, pad])
        if color is not None:
            color = np.concatenate([color, np.zeros((pad_T - target_T,) + color.shape[1:])])
    return SkeletonSequence(joints, seq.body_count, seq.body_id, color)


def select_frame(sample_or_T, fraction: float = 0.5) -> FrameRef:
    """Index of the RGB frame at ``fraction`` of the clip: floor(fraction * (T - 1))."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if isinstance(sample_or_T, ActionSample):
        T = sample_or_T.skeleton.frame_count
    elif isinstance(sample_or_T, SkeletonSequence):
        T = sample_or_T.frame_count
    else:
        T = int(sample_or_T)
    return FrameRef(int(math.floor(fraction * (T - 1))), float(fraction))


# --------------------------------------------------------------------------
# Dataset manifest
# --------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    skeleton_file: str
    frame_dir: str
    label: int
    camera: CameraParams
    # optional extensions; absent keys are omitted on write
    sample_id: str = ""
    split: str = ""
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"skeleton_file": self.skeleton_file, "frame_dir": self.frame_dir,
             "label": self.label, "camera": self.camera.to_dict()}
        if self.sample_id:
            d["id"] = self.sample_id
        if self.split:
            d["split"] = self.split
        if self.meta:
            d["meta"] = self.meta
        return d


@dataclass
class Manifest:
    samples: list
    classes: list
    root: str = "."

    def entries(self, split: str | None = None) -> list:
        if split is None:
            return list(self.samples)
        return [e for e in self.samples if e.split == split]


def load_manifest(path) -> Manifest:
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        doc = json.load(fh)
    entries = []
    for i, s in enumerate(doc["samples"]):
        entries.append(ManifestEntry(
            skeleton_file=s["skeleton_file"], frame_dir=s["frame_dir"], label=int(s["label"]),
            camera=CameraParams.from_dict(s["camera"]), sample_id=s.get("id", str(i)),
            split=s.get("split", ""), meta=s.get("meta", {})))
    K = len(doc["classes"])
    bad = [e.label for e in entries if not 0 <= e.label < K]
    if bad:
        raise ValueError(f"labels {sorted(set(bad))} outside [0, {K})")
    return Manifest(entries, list(doc["classes"]), root=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: Manifest, path) -> None:
    doc = {"samples": [e.to_dict() for e in manifest.samples], "classes": list(manifest.classes)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_sample(manifest: Manifest, entry: ManifestEntry, body: int = 0) -> ActionSample:
    skel_path = os.path.join(manifest.root, entry.skeleton_file)
    seqs = read_ntu_skeleton(skel_path)
    if not seqs:
        raise MalformedFile(f"{skel_path}: no bodies")
    frame_dir = os.path.join(manifest.root, entry.frame_dir)
    frames = sorted(f for f in os.listdir(frame_dir) if f.lower().endswith((".png", ".jpg", ".jpeg")))
    return ActionSample(seqs[body], tuple(os.path.join(frame_dir, f) for f in frames), entry.label,
                        entry.camera, sample_id=entry.sample_id, meta=dict(entry.meta))
