"""Parameter and multiply-accumulate counts for one forward pass of one sample.

Parameters come from enumerating weight tensors. MACs come from closed-form
per-layer formulas evaluated on the shapes seen during a dummy forward pass:

* conv: C_in / groups * C_out * prod(kernel) * prod(output spatial)
* linear: in * out (per row)
* graph conv: P * C_in * C_out * T * V (channel mixing) + P * C_out * T * V * V (aggregation)
* LSTM: 4H * (I + H) per step, direction and layer
* relation fusion: 2 * C * C' * N (theta, phi) + C' * N * N (theta^T phi)
  + C * N * N (aggregation)
* self-attention masks: C * H * W per branch

The last two apply their 1x1 convolutions functionally, so their MACs are
booked on the parent module rather than on the conv layers.

Element-wise operations (activations, normalisation, attention products)
are not counted. 1 MAC = 2 FLOPs.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
import math

import torch
from torch import nn

from .config import RunConfig
from .dataset import feature_grid
from .fusion import RelationFusion
from .model import HEAD_PREFIXES, MMFFNet
from .skeleton_io import SCHEMAS
from .rgb_stream import SelfAttention
from .skeleton_stream import BiLSTM, GraphConv

FLOPS_PER_MAC = 2


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    layers: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_flops(self) -> int:
        return FLOPS_PER_MAC * self.total_macs

    def by_module(self, depth: int = 1) -> dict:
        """Sums per name prefix of ``depth`` dotted components."""
        out: dict = {}
        for l in self.layers:
            key = ".".join(l.name.split(".")[:depth])
            p, m = out.get(key, (0, 0))
            out[key] = (p + l.params, m + l.macs)
        return out

    def module(self, prefix: str) -> tuple[int, int]:
        sel = [l for l in self.layers if l.name == prefix or l.name.startswith(prefix + ".")]
        return sum(l.params for l in sel), sum(l.macs for l in sel)

    def to_dict(self) -> dict:
        return {
            "convention": "1 MAC = 2 FLOPs; one sample, one forward pass",
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "modules": {k: {"params": p, "macs": m} for k, (p, m) in self.by_module(2).items()},
            "layers": [vars(l) for l in self.layers],
        }

    def text(self) -> str:
        lines = ["# convention: 1 MAC = 2 FLOPs; one sample, one forward pass",
                 f"{'module':40s} {'params':>10s} {'MACs':>12s}"]
        for k, (p, m) in self.by_module(2).items():
            lines.append(f"{k:40s} {p:10d} {m:12d}")
        lines.append(f"{'total':40s} {self.total_params:10d} {self.total_macs:12d}")
        lines.append(f"{'total FLOPs':40s} {'':10s} {self.total_flops:12d}")
        return "\n".join(lines) + "\n"


def _own_params(mod: nn.Module) -> int:
    return sum(p.numel() for p in mod.parameters(recurse=False))


def _macs(mod: nn.Module, inputs, output) -> int:
    if isinstance(mod, (nn.Conv1d, nn.Conv2d)):
        k = math.prod(mod.kernel_size)
        spatial = math.prod(output.shape[2:])
        per = mod.in_channels // mod.groups * mod.out_channels * k * spatial
        return per * output.shape[0]
    if isinstance(mod, nn.Linear):
        rows = output.numel() // output.shape[-1]
        return mod.in_features * mod.out_features * rows
    if isinstance(mod, GraphConv):
        B, O, T, V = output.shape
        P = mod.weight.shape[0]
        return B * (P * mod.in_channels * O * T * V + P * O * T * V * V)
    if isinstance(mod, BiLSTM):
        x = inputs[0]
        B, T = x.shape[0], x.shape[1]
        total, I = 0, x.shape[2]
        for _ in range(mod.layers):
            total += 2 * T * 4 * mod.hidden * (I + mod.hidden)
            I = 2 * mod.hidden
        return B * total
    if isinstance(mod, RelationFusion):
        x = inputs[0]
        B, C, N = x.shape
        inner = mod.theta.out_channels
        agg = C * N * N if mod.mode == "matmul" else 0
        return B * (2 * C * inner * N + inner * N * N + agg)
    if isinstance(mod, SelfAttention):
        enabled = inputs[1] if len(inputs) > 1 else True
        x = inputs[0]
        return x.shape[0] * len(mod.masks) * math.prod(x.shape[1:]) if enabled else 0
    return 0


COUNTED = (nn.Conv1d, nn.Conv2d, nn.Linear, GraphConv, BiLSTM, RelationFusion, SelfAttention)


def dummy_inputs(cfg: RunConfig, batch: int = 1):
    V = SCHEMAS[cfg.model.joint_schema].joint_count
    T = cfg.model.pad_len or cfg.model.seq_len
    S = cfg.augment.out_size
    Fn = len(cfg.frame_fractions)
    h, w = feature_grid(cfg)
    sk = torch.zeros(batch, 3, T, V)
    im = torch.zeros(batch, Fn, 3, S, S)
    ma = torch.ones(batch, Fn, 1, h, w)
    return sk, im, ma


@torch.no_grad()
def count(model: MMFFNet, cfg: RunConfig) -> ComplexityReport:
    """Count every parameterised / MAC-bearing module of the network (temporary heads excluded)."""
    layers: dict = {}
    hooks = []
    for name, mod in model.named_modules():
        if not name or (name + ".").startswith(HEAD_PREFIXES):
            continue
        own = _own_params(mod)
        if own or isinstance(mod, COUNTED):
            layers[name] = LayerCost(name, type(mod).__name__, own, 0)

            def hook(m, inp, out, name=name):
                o = out[0] if isinstance(out, tuple) else out
                layers[name].macs += _macs(m, inp, o)
            if isinstance(mod, COUNTED):
                hooks.append(mod.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        model(*dummy_inputs(cfg))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return ComplexityReport(list(layers.values()))


def report_complexity(cfg: RunConfig, num_classes: int | None = None) -> ComplexityReport:
    torch.manual_seed(0)
    K = num_classes or cfg.model.num_classes or 9
    return count(MMFFNet(cfg, K), cfg)


def video_variant(cfg: RunConfig, frames: int = 16) -> RunConfig:
    """Same network fed ``frames`` evenly spaced frames instead of one."""
    v = copy.deepcopy(cfg)
    v.frame_fractions = tuple((k + 0.5) / frames for k in range(frames))
    return v
