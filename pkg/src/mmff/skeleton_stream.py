"""Skeleton stream backbones: spatio-temporal graph convolution and stacked Bi-LSTM."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import BadEdge, ShapeMismatch

DEGREE_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Partitioned adjacency of the intra-body skeleton graph.

    ``partitions`` is P x V x V with ``partitions.sum(0) == A + I`` and
    ``normalized[j] = D^-1/2 A_j D^-1/2``. D holds the degrees of A + I
    (``degree="full"``) or of A_j itself (``degree="partition"``), plus eps.
    """

    joint_count: int
    edges: tuple
    adjacency: np.ndarray
    partitions: np.ndarray
    normalized: np.ndarray
    strategy: str
    eps: float

    @property
    def num_partitions(self) -> int:
        return self.partitions.shape[0]


def _hop_distance(A: np.ndarray, center: int) -> np.ndarray:
    V = A.shape[0]
    hop = np.full(V, np.inf)
    hop[center] = 0
    q = deque([center])
    while q:
        i = q.popleft()
        for j in np.flatnonzero(A[i]):
            if hop[j] == np.inf:
                hop[j] = hop[i] + 1
                q.append(j)
    return hop


def normalize_partitions(partitions: np.ndarray, eps: float = DEGREE_EPS, degree_source=None) -> np.ndarray:
    """Symmetric degree normalisation of each partition.

    Degrees are row sums of the partition itself unless ``degree_source``
    (V x V) is given, in which case its row sums are shared by all partitions.
    """
    out = np.empty_like(partitions, dtype=np.float64)
    for j, Aj in enumerate(partitions):
        src = Aj if degree_source is None else degree_source
        d = src.sum(axis=1) + eps
        dm = 1.0 / np.sqrt(d)
        out[j] = dm[:, None] * Aj * dm[None, :]
    return out


def build_graph(edges, joint_count: int, strategy: str = "spatial", center: int = 0,
                eps: float = DEGREE_EPS, degree: str = "full") -> SkeletonGraph:
    """Build the partitioned skeleton graph.

    ``uniform`` keeps a single partition A + I. ``spatial`` splits A + I into
    root (self and same hop distance), centripetal and centrifugal parts
    relative to ``center``. By default every partition is normalised by the
    degrees of A + I. ``degree="partition"`` uses each partition's own row
    sums; an edge into a row that is empty in that partition then gets weight
    1/sqrt(eps).
    """
    V = int(joint_count)
    if V < 1:
        raise BadEdge("joint_count must be positive")
    A = np.zeros((V, V))
    seen = set()
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < V and 0 <= j < V):
            raise BadEdge(f"edge ({i}, {j}) outside [0, {V})")
        if i == j:
            raise BadEdge(f"self-loop at joint {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise BadEdge(f"duplicate edge ({i}, {j})")
        seen.add(key)
        A[i, j] = A[j, i] = 1.0
    I = np.eye(V)
    if strategy == "uniform":
        parts = (A + I)[None]
    elif strategy == "spatial":
        if not 0 <= center < V:
            raise BadEdge(f"center joint {center} outside [0, {V})")
        hop = _hop_distance(A, center)
        root, close, far = np.zeros((V, V)), np.zeros((V, V)), np.zeros((V, V))
        for i in range(V):
            root[i, i] = 1.0
            for j in np.flatnonzero(A[i]):
                if hop[j] == hop[i]:
                    root[i, j] = 1.0
                elif hop[j] < hop[i]:
                    close[i, j] = 1.0
                else:
                    far[i, j] = 1.0
        parts = np.stack([root, close, far])
    else:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    if degree not in ("partition", "full"):
        raise ValueError(f"unknown degree mode {degree!r}")
    norm = normalize_partitions(parts, eps, None if degree == "partition" else A + I)
    return SkeletonGraph(V, tuple(sorted(seen)), A, parts, norm, strategy, eps)


# --------------------------------------------------------------------------
# Graph convolution
# --------------------------------------------------------------------------

def graph_conv(f_in: torch.Tensor, adjacency: torch.Tensor, weight: torch.Tensor,
               bias: torch.Tensor | None = None) -> torch.Tensor:
    """sum_j Anorm_j f_in W_j, applied independently to every frame.

    f_in: (B, C_in, T, V) or (C_in, T, V); adjacency: (P, V, V) normalised
    partitions (or a :class:`SkeletonGraph`); weight: (P, C_in, C_out).
    """
    if isinstance(adjacency, SkeletonGraph):
        adjacency = torch.as_tensor(adjacency.normalized, dtype=f_in.dtype)
    squeeze = f_in.dim() == 3
    if squeeze:
        f_in = f_in.unsqueeze(0)
    if f_in.dim() != 4:
        raise ShapeMismatch(f"expected (B, C, T, V) input, got {tuple(f_in.shape)}")
    P, V, V2 = adjacency.shape
    if V != V2 or f_in.shape[3] != V:
        raise ShapeMismatch(f"input has {f_in.shape[3]} joints, graph has {V}")
    if weight.shape[0] != P or weight.shape[1] != f_in.shape[1]:
        raise ShapeMismatch(
            f"weight {tuple(weight.shape)} incompatible with {P} partitions, {f_in.shape[1]} channels")
    B, C, T, _ = f_in.shape
    O = weight.shape[2]
    # mix channels per partition (one 1x1 conv), then aggregate neighbours;
    # this order keeps every intermediate contiguous
    w = weight.permute(0, 2, 1).reshape(P * O, C, 1, 1)
    mixed = F.conv2d(f_in, w).reshape(B, P, O * T, V)
    out = (mixed @ adjacency.transpose(1, 2)).sum(dim=1).reshape(B, O, T, V)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out.squeeze(0) if squeeze else out


class GraphConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, graph: SkeletonGraph, bias: bool = True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.register_buffer("adjacency", torch.tensor(graph.normalized, dtype=torch.float64), persistent=False)
        P = graph.num_partitions
        self.weight = nn.Parameter(torch.empty(P, in_channels, out_channels))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        bound = 1.0 / math.sqrt(in_channels * P)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x):
        return graph_conv(x, self.adjacency.to(x.dtype), self.weight, self.bias)


class STGCNBlock(nn.Module):
    """Graph conv, (BN,) ReLU, temporal conv along T (strided), (BN,) optional residual, ReLU."""

    def __init__(self, in_channels, out_channels, graph, stride=1, kernel=3, residual=True,
                 batch_norm=True):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("temporal kernel must be odd")
        self.gcn = GraphConv(in_channels, out_channels, graph)
        self.tcn = nn.Conv2d(out_channels, out_channels, (kernel, 1), stride=(stride, 1),
                             padding=((kernel - 1) // 2, 0))
        self.bn_g = nn.BatchNorm2d(out_channels) if batch_norm else nn.Identity()
        self.bn_t = nn.BatchNorm2d(out_channels) if batch_norm else nn.Identity()
        if not residual:
            self.residual = None
        elif in_channels == out_channels and stride == 1:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Conv2d(in_channels, out_channels, 1, stride=(stride, 1))

    def forward(self, x):
        y = self.bn_t(self.tcn(F.relu(self.bn_g(self.gcn(x)))))
        if self.residual is not None:
            y = y + self.residual(x)
        return F.relu(y)


class STGCN(nn.Module):
    """Stack of graph/temporal conv blocks mapping (B, C0, T, V) to (B, C_S, T', V).

    With ``batch_norm`` the input is first normalised per (joint, coordinate)
    and every convolution is followed by batch normalisation.
    """

    def __init__(self, graph: SkeletonGraph, in_channels=3, channels=(16, 32, 32),
                 strides=(1, 2, 2), kernel=3, residual=True, batch_norm=True):
        super().__init__()
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have equal length")
        V = graph.joint_count
        self.data_bn = nn.BatchNorm1d(in_channels * V) if batch_norm else None
        blocks, c = [], in_channels
        for i, (co, s) in enumerate(zip(channels, strides)):
            blocks.append(STGCNBlock(c, co, graph, s, kernel, residual and i > 0, batch_norm))
            c = co
        self.blocks = nn.ModuleList(blocks)
        self.graph = graph
        self.out_channels = c
        self.strides = tuple(strides)

    def output_length(self, T: int) -> int:
        for s in self.strides:
            T = (T - 1) // s + 1
        return T

    def forward(self, x):
        if x.shape[-1] != self.graph.joint_count:
            raise ShapeMismatch(f"expected {self.graph.joint_count} joints, got {x.shape[-1]}")
        if self.data_bn is not None:
            B, C, T, V = x.shape
            x = x.permute(0, 3, 1, 2).reshape(B, V * C, T)
            x = self.data_bn(x).reshape(B, V, C, T).permute(0, 2, 3, 1).contiguous()
        for b in self.blocks:
            x = b(x)
        return x


def stgcn_forward(seq_tensor: torch.Tensor, model: STGCN) -> torch.Tensor:
    squeeze = seq_tensor.dim() == 3
    out = model(seq_tensor.unsqueeze(0) if squeeze else seq_tensor)
    return out.squeeze(0) if squeeze else out


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------

def lstm_cell(x_t, h_prev, c_prev, weight, bias=None):
    """One LSTM transition with gate order (input, forget, output, candidate).

    ``weight`` is (4H, I + H) acting on ``[x_t; h_prev]``.
    """
    H = h_prev.shape[-1]
    z = torch.cat([x_t, h_prev], dim=-1) @ weight.transpose(-1, -2)
    if bias is not None:
        z = z + bias
    i = torch.sigmoid(z[..., 0:H])
    f = torch.sigmoid(z[..., H:2 * H])
    o = torch.sigmoid(z[..., 2 * H:3 * H])
    u = torch.tanh(z[..., 3 * H:4 * H])
    c_t = f * c_prev + i * u
    h_t = o * torch.tanh(c_t)
    return h_t, c_t


class BiLSTM(nn.Module):
    """Stacked bidirectional LSTM; output is the concatenated final cell states of the top layer."""

    def __init__(self, input_size: int, hidden: int = 16, layers: int = 3):
        super().__init__()
        self.input_size, self.hidden, self.layers = input_size, hidden, layers
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        bound = 1.0 / math.sqrt(hidden)
        for layer in range(layers):
            in_size = input_size if layer == 0 else 2 * hidden
            for _direction in range(2):
                w = nn.Parameter(torch.empty(4 * hidden, in_size + hidden).uniform_(-bound, bound))
                b = nn.Parameter(torch.empty(4 * hidden).uniform_(-bound, bound))
                self.weights.append(w)
                self.biases.append(b)
        self.out_channels = 2 * hidden

    def _run(self, x, w, b, reverse):
        B, T, _ = x.shape
        h = x.new_zeros(B, self.hidden)
        c = x.new_zeros(B, self.hidden)
        hs = [None] * T
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            h, c = lstm_cell(x[:, t], h, c, w, b)
            hs[t] = h
        return torch.stack(hs, dim=1), c

    def forward(self, x):
        """x: (B, T, I) -> (B, 2H)."""
        if x.shape[-1] != self.input_size:
            raise ShapeMismatch(f"expected step size {self.input_size}, got {x.shape[-1]}")
        for layer in range(self.layers):
            hf, cf = self._run(x, self.weights[2 * layer], self.biases[2 * layer], False)
            hb, cb = self._run(x, self.weights[2 * layer + 1], self.biases[2 * layer + 1], True)
            x = torch.cat([hf, hb], dim=-1)
        return torch.cat([cf, cb], dim=-1)


def flatten_joints(seq_tensor: torch.Tensor) -> torch.Tensor:
    """(B, 3, T, V) -> (B, T, V*3) with each joint's xyz contiguous, joints in order."""
    B, C, T, V = seq_tensor.shape
    return seq_tensor.permute(0, 2, 3, 1).reshape(B, T, V * C)


def bilstm_forward(seq_tensor: torch.Tensor, model: BiLSTM) -> torch.Tensor:
    """seq_tensor: (T, N*3) or (B, T, N*3)."""
    squeeze = seq_tensor.dim() == 2
    out = model(seq_tensor.unsqueeze(0) if squeeze else seq_tensor)
    return out.squeeze(0) if squeeze else out


class SkeletonStream(nn.Module):
    """Backbone wrapper taking (B, 3, T, V) skeleton tensors.

    ``forward`` returns the backbone feature (map for ST-GCN, vector for
    Bi-LSTM); ``pool`` reduces it to a (B, C_S) vector.
    """

    def __init__(self, backbone: str, graph: SkeletonGraph, channels=(16, 32, 32), strides=(1, 2, 2),
                 kernel=3, residual=True, lstm_hidden=16, lstm_layers=3, in_channels=3,
                 batch_norm=True):
        super().__init__()
        self.kind = backbone
        if backbone == "stgcn":
            self.net = STGCN(graph, in_channels, channels, strides, kernel, residual, batch_norm)
        elif backbone == "bilstm":
            self.net = BiLSTM(graph.joint_count * in_channels, lstm_hidden, lstm_layers)
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.out_channels = self.net.out_channels

    def forward(self, x):
        if self.kind == "stgcn":
            return self.net(x)
        return self.net(flatten_joints(x))

    def pool(self, feat):
        return feat.mean(dim=(2, 3)) if feat.dim() == 4 else feat
