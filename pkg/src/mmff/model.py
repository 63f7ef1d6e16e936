"""The two-stream network: skeleton stream, RGB stream, late-fusion module."""
from __future__ import annotations

import torch
from torch import nn

from .config import RunConfig
from .fusion import DecisionFusion, LSTMFusion, MMFFFusion, SumFusion
from .rgb_stream import RGBStream
from .skeleton_io import SCHEMAS
from .skeleton_stream import SkeletonStream, build_graph

# parameter name prefixes
STREAM_PREFIXES = ("skeleton.", "rgb.")
HEAD_PREFIXES = ("skel_head.", "rgb_head.")
FUSION_PREFIX = "fusion."


class MMFFNet(nn.Module):
    """Skeleton + RGB streams joined by the configured fusion module.

    ``skel_head`` / ``rgb_head`` are the temporary per-stream classifiers
    used while the streams are trained on their own; they are not part of
    the saved network.
    """

    def __init__(self, cfg: RunConfig, num_classes: int):
        super().__init__()
        m = cfg.model
        schema = SCHEMAS[m.joint_schema]
        self.graph = build_graph(schema.edges, schema.joint_count, m.graph_strategy, schema.center,
                                 degree=m.degree_mode)
        self.num_classes = num_classes
        self.fusion_kind = m.fusion
        self.skeleton = SkeletonStream(m.backbone, self.graph, m.gcn_channels, m.gcn_strides,
                                       m.temporal_kernel, m.residual, m.lstm_hidden, m.lstm_layers)
        self.rgb = RGBStream(cfg.rgb_mode, m.cnn_channels, m.cnn_strides, 3, m.attn_dim,
                             m.self_attention, m.skeleton_attention, batch_norm=m.cnn_batch_norm)
        cs, cr = self.skeleton.out_channels, self.rgb.out_channels
        self.skel_head = nn.Linear(cs, num_classes)
        self.rgb_head = nn.Linear(cr, num_classes)
        if m.fusion == "gcn":
            self.fusion = MMFFFusion(cs, cr, num_classes, m.relation_channels or None, m.relation_mode,
                                     m.head_channels, m.head_hidden)
        elif m.fusion == "lstm":
            self.fusion = LSTMFusion(cs, cr, num_classes, m.head_hidden)
        elif m.fusion == "decision":
            self.fusion = DecisionFusion(cs, cr, num_classes, m.decision_weight)
        else:
            self.fusion = SumFusion(cs, cr, num_classes, m.head_hidden)

    # -- pieces --------------------------------------------------------------

    def stream_features(self, skeletons, images, masks):
        return self.skeleton(skeletons), self.rgb(images, masks)

    def fuse(self, f_skel, f_rgb):
        """Class scores from (unpooled) stream features."""
        if self.fusion_kind == "gcn":
            return self.fusion(f_skel, f_rgb)
        return self.fusion(self.skeleton.pool(f_skel), self.rgb.pool(f_rgb))

    def stream_scores(self, stream: str, skeletons=None, images=None, masks=None):
        if stream == "skeleton":
            return self.skel_head(self.skeleton.pool(self.skeleton(skeletons)))
        if stream == "rgb":
            return self.rgb_head(self.rgb.pool(self.rgb(images, masks)))
        raise ValueError(f"unknown stream {stream!r}")

    def forward(self, skeletons, images, masks):
        return self.fuse(*self.stream_features(skeletons, images, masks))

    # -- parameter groups ------------------------------------------------------

    def stream_parameters(self, stream: str):
        mod = self.skeleton if stream == "skeleton" else self.rgb
        head = self.skel_head if stream == "skeleton" else self.rgb_head
        return list(mod.parameters()) + list(head.parameters())

    def network_state(self) -> dict:
        """State dict without the temporary stream heads."""
        return {k: v for k, v in self.state_dict().items() if not k.startswith(HEAD_PREFIXES)}
