"""Oracles shared by the test-suite: finite differences and single-modality classifiers."""
from __future__ import annotations

import numpy as np
import torch

from .dataset import load_frame
from .skeleton_io import Manifest, load_manifest, load_sample, select_frame, va_pre_normalize


def numeric_grad(fn, inputs: list, step: float = 1e-5) -> list:
    """Central differences of scalar ``fn(*inputs)`` w.r.t. every entry of every input."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = float(fn(*inputs))
                flat[i] = old - step
                down = float(fn(*inputs))
                flat[i] = old
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||), or the absolute difference when both are ~0."""
    scale = max(a.norm().item(), b.norm().item())
    diff = (a - b).norm().item()
    return diff / scale if scale > 1e-8 else diff


def gradient_check(fn, inputs: list, step: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between autograd and central differences.

    Non-scalar outputs are contracted with a fixed random tensor first.
    Inputs must be float64 leaf tensors.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    proj = None
    if out.dim() > 0:
        g = torch.Generator().manual_seed(seed)
        proj = torch.randn(out.shape, generator=g, dtype=out.dtype)

    def scalar(*xs):
        o = fn(*xs)
        return (o * proj).sum() if proj is not None else o

    analytic = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if a is None else a for a, x in zip(analytic, inputs)]
    numeric = numeric_grad(scalar, [x.detach().clone() for x in inputs], step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


# --------------------------------------------------------------------------
# Single-modality oracle classifiers
# --------------------------------------------------------------------------

def _split(manifest: Manifest):
    return manifest.entries("train"), manifest.entries("test")


def skeleton_features(manifest: Manifest, entries) -> np.ndarray:
    """Flattened VA-pre normalised joint trajectories."""
    return np.stack([va_pre_normalize(load_sample(manifest, e).skeleton).joints.ravel() for e in entries])


def color_histogram(image: np.ndarray, bins: int = 4) -> np.ndarray:
    """Joint RGB histogram (bins^3, normalised) of a C x H x W image in [0, 1]."""
    q = np.minimum((image * bins).astype(int), bins - 1)
    idx = (q[0] * bins + q[1]) * bins + q[2]
    h = np.bincount(idx.ravel(), minlength=bins ** 3).astype(np.float64)
    return h / h.sum()


def histogram_features(manifest: Manifest, entries, fraction: float = 0.5, bins: int = 4) -> np.ndarray:
    out = []
    for e in entries:
        s = load_sample(manifest, e)
        ref = select_frame(s, fraction)
        out.append(color_histogram(load_frame(s.frame_paths[ref.index]), bins))
    return np.stack(out)


def nearest_neighbour(train_x, train_y, test_x) -> np.ndarray:
    """1-NN by Euclidean distance; ties go to the earliest training sample."""
    d = ((test_x[:, None, :] - train_x[None, :, :]) ** 2).sum(-1)
    return np.asarray(train_y)[np.argmin(d, axis=1)]


def oracle_accuracy(manifest: Manifest | str, kind: str, family: str | None = None) -> float:
    """Test accuracy of the skeleton-NN (``"skeleton"``) or colour-histogram (``"color"``) oracle."""
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    train, test = _split(manifest)
    if family is not None:
        train = [e for e in train if e.meta.get("family") == family]
        test = [e for e in test if e.meta.get("family") == family]
    feats = skeleton_features if kind == "skeleton" else histogram_features
    pred = nearest_neighbour(feats(manifest, train), [e.label for e in train], feats(manifest, test))
    return float(np.mean(pred == np.array([e.label for e in test])))
