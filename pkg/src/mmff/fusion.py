"""Late fusion heads turning skeleton and RGB features into class scores.

Every head returns unnormalised scores whose softmax is the class
distribution; the decision-fusion head returns log-probabilities so the same
holds for it.
"""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ShapeMismatch, ZeroVector

LEAKY_SLOPE = 0.01
L2_EPS = 1e-12


class Logits(NamedTuple):
    scores: torch.Tensor
    probs: torch.Tensor


def as_logits(scores: torch.Tensor) -> Logits:
    return Logits(scores, torch.softmax(scores, dim=-1))


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    """x / ||x||, with the squared norm clamped below at ``L2_EPS``.

    Clamping (rather than adding eps) keeps the result exactly invariant to
    positive scaling whenever ||x||^2 >= eps.
    """
    norm_sq = (x * x).sum(dim=-1, keepdim=True)
    if bool((norm_sq == 0).any()):
        raise ZeroVector("cannot L2-normalise an all-zero feature vector")
    return x / torch.sqrt(norm_sq.clamp_min(L2_EPS))


class LSTMFusion(nn.Module):
    """concat -> L2 norm -> FC + leaky ReLU -> FC -> FC."""

    def __init__(self, skel_dim: int, rgb_dim: int, num_classes: int, hidden: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(skel_dim + rgb_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, num_classes)

    def forward(self, f_skel, f_rgb):
        x = l2_normalize(torch.cat([f_skel, f_rgb], dim=-1))
        x = F.leaky_relu(self.fc1(x), LEAKY_SLOPE)
        return self.fc3(self.fc2(x))


def lstm_fusion(f_skel, f_rgb, head: LSTMFusion) -> Logits:
    return as_logits(head(f_skel, f_rgb))


def build_combined(F_gcn: torch.Tensor, F_rgb: torch.Tensor) -> torch.Tensor:
    """Cross-modal feature of shape (B, C_R + C_S, S + V).

    The skeleton map (B, C_S, T', V) is max-pooled over time. Each RGB column
    gets the skeleton GAP vector appended below it, each skeleton column gets
    the RGB GAP vector stacked above it; channel order is [RGB; skeleton].
    """
    squeeze = F_gcn.dim() == 3
    if squeeze:
        F_gcn, F_rgb = F_gcn.unsqueeze(0), F_rgb.unsqueeze(0)
    if F_gcn.dim() != 4 or F_rgb.dim() != 3 or F_gcn.shape[0] != F_rgb.shape[0]:
        raise ShapeMismatch(f"expected (B,C_S,T,V) and (B,C_R,S), got "
                            f"{tuple(F_gcn.shape)} and {tuple(F_rgb.shape)}")
    skel = F_gcn.amax(dim=2)
    f_gcn = skel.mean(dim=-1)
    f_rgb = F_rgb.mean(dim=-1)
    S, V = F_rgb.shape[-1], skel.shape[-1]
    rgb_cols = torch.cat([F_rgb, f_gcn.unsqueeze(-1).expand(-1, -1, S)], dim=1)
    skel_cols = torch.cat([f_rgb.unsqueeze(-1).expand(-1, -1, V), skel], dim=1)
    out = torch.cat([rgb_cols, skel_cols], dim=2)
    return out.squeeze(0) if squeeze else out


def relation_fusion(F_com: torch.Tensor, theta_w, theta_b, phi_w, phi_b, mode: str = "matmul"):
    """Relation-mask aggregation over the S + V positions.

    theta/phi are 1x1 convolutions (C' x C weights). The mask is the
    row-softmax of theta(F)^T phi(F); ``matmul`` returns F_com @ M^T, so
    every output column is a convex combination of input columns.
    ``broadcast`` multiplies each column by its mean incoming weight instead.
    """
    squeeze = F_com.dim() == 2
    x = F_com.unsqueeze(0) if squeeze else F_com
    theta_w = theta_w.reshape(theta_w.shape[0], -1)
    phi_w = phi_w.reshape(phi_w.shape[0], -1)
    if theta_w.shape[1] != x.shape[1] or phi_w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"projections expect {theta_w.shape[1]} channels, got {x.shape[1]}")
    th = torch.einsum("oc,bcn->bon", theta_w, x)
    ph = torch.einsum("oc,bcn->bon", phi_w, x)
    if theta_b is not None:
        th = th + theta_b.view(1, -1, 1)
    if phi_b is not None:
        ph = ph + phi_b.view(1, -1, 1)
    M = torch.softmax(th.transpose(1, 2) @ ph, dim=-1)
    if mode == "matmul":
        out = x @ M.transpose(1, 2)
    elif mode == "broadcast":
        out = x * M.mean(dim=1, keepdim=True)
    else:
        raise ValueError(f"unknown relation mode {mode!r}")
    if squeeze:
        return out.squeeze(0), M.squeeze(0)
    return out, M


class RelationFusion(nn.Module):
    def __init__(self, channels: int, inner: int | None = None, mode: str = "matmul"):
        super().__init__()
        inner = inner or max(1, channels // 2)
        self.theta = nn.Conv1d(channels, inner, 1)
        self.phi = nn.Conv1d(channels, inner, 1)
        self.mode = mode

    def forward(self, F_com):
        return relation_fusion(F_com, self.theta.weight, self.theta.bias,
                               self.phi.weight, self.phi.bias, self.mode)


class GCNFusionHead(nn.Module):
    """2-D conv over the relation feature, ReLU, GAP, FC, ReLU, FC."""

    def __init__(self, channels: int, num_classes: int, conv_channels: int = 64, hidden: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(channels, conv_channels, 1)
        self.fc1 = nn.Linear(conv_channels, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, F_rel):
        if F_rel.dim() != 3 or F_rel.shape[1] != self.conv.in_channels:
            raise ShapeMismatch(f"expected (B, {self.conv.in_channels}, N), got {tuple(F_rel.shape)}")
        x = F.relu(self.conv(F_rel.unsqueeze(2)))
        x = x.mean(dim=(2, 3))
        return self.fc2(F.relu(self.fc1(x)))


def gcn_fusion_head(F_rel, head: GCNFusionHead) -> Logits:
    squeeze = F_rel.dim() == 2
    s = head(F_rel.unsqueeze(0) if squeeze else F_rel)
    return as_logits(s.squeeze(0) if squeeze else s)


class MMFFFusion(nn.Module):
    """Combined feature -> relation fusion -> classification head."""

    def __init__(self, skel_channels, rgb_channels, num_classes, inner=None, mode="matmul",
                 conv_channels=64, hidden=64):
        super().__init__()
        C = skel_channels + rgb_channels
        self.relation = RelationFusion(C, inner, mode)
        self.head = GCNFusionHead(C, num_classes, conv_channels, hidden)

    def forward(self, F_gcn, F_rgb, return_mask=False):
        F_rel, M = self.relation(build_combined(F_gcn, F_rgb))
        scores = self.head(F_rel)
        return (scores, M) if return_mask else scores


def decision_fusion(logits_a, logits_b, w: float = 0.5) -> Logits:
    """Weighted sum of the two streams' class probabilities."""
    if logits_a.shape != logits_b.shape:
        raise ShapeMismatch(f"{tuple(logits_a.shape)} vs {tuple(logits_b.shape)}")
    p = w * torch.softmax(logits_a, -1) + (1.0 - w) * torch.softmax(logits_b, -1)
    return Logits(torch.log(p.clamp_min(1e-30)), p)


class DecisionFusion(nn.Module):
    """Per-stream linear classifiers whose probabilities are mixed with weight ``w``."""

    def __init__(self, skel_dim, rgb_dim, num_classes, w=0.5):
        super().__init__()
        self.skel_head = nn.Linear(skel_dim, num_classes)
        self.rgb_head = nn.Linear(rgb_dim, num_classes)
        self.w = float(w)

    def stream_scores(self, f_skel, f_rgb):
        return self.skel_head(f_skel), self.rgb_head(f_rgb)

    def forward(self, f_skel, f_rgb):
        a, b = self.stream_scores(f_skel, f_rgb)
        return decision_fusion(a, b, self.w).scores


class SumFusion(nn.Module):
    """Project both features to a common size, add, classify."""

    def __init__(self, skel_dim, rgb_dim, num_classes, dim=64):
        super().__init__()
        self.proj_skel = nn.Linear(skel_dim, dim, bias=False)
        self.proj_rgb = nn.Linear(rgb_dim, dim, bias=False)
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, f_skel, f_rgb):
        return self.fc(self.proj_skel(f_skel) + self.proj_rgb(f_rgb))


def sum_fusion(f_skel, f_rgb, head: SumFusion) -> Logits:
    if head.proj_skel.out_features != head.proj_rgb.out_features:
        raise ShapeMismatch("projected dimensions differ")
    return as_logits(head(f_skel, f_rgb))
