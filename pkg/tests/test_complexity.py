import torch
from torch import nn

from mmff.complexity import FLOPS_PER_MAC, _macs, _own_params, report_complexity, video_variant
from mmff.config import desk_config
from mmff.model import HEAD_PREFIXES
from mmff.training import build_model


def test_fc_4x3():
    fc = nn.Linear(4, 3)
    out = fc(torch.zeros(1, 4))
    assert _own_params(fc) == 15
    assert _macs(fc, (torch.zeros(1, 4),), out) == 12


def test_conv_formula():
    conv = nn.Conv2d(6, 4, 3, padding=1, groups=2)
    x = torch.zeros(2, 6, 5, 7)
    assert _macs(conv, (x,), conv(x)) == 2 * (3 * 4 * 9 * 35)


def hand_count(K=9):
    """Desk network, layer by layer from the configuration numbers alone."""
    V, T, P, kt = 10, 24, 3, 3
    params = macs = 0
    params += 2 * 3 * V  # data BN
    c_in = 3
    for k, (c, s) in enumerate(zip((16, 32, 32), (1, 2, 2))):
        t_out = T // s
        params += P * c_in * c + c + 2 * c  # graph conv + BN
        macs += P * c_in * c * T * V + P * c * T * V * V
        params += c * c * kt + c + 2 * c  # temporal conv + BN
        macs += c * c * kt * t_out * V
        if k > 0 and (c_in != c or s != 1):  # the input block has no residual
            params += c_in * c + c
            macs += c_in * c * t_out * V
        c_in, T = c, t_out
    C_S = c_in
    # RGB: two stride-2 3x3 convs on a 32 x 32 crop, two attention branches
    H = 32
    c_in = 3
    for c in (16, 32):
        H //= 2
        params += c_in * c * 9 + c + 2 * c  # conv + BN
        macs += c_in * c * 9 * H * H
        c_in = c
    C_R, S = c_in, H * H
    params += 2 * (C_R + 1) + 2 * (C_R * 32 + 32)
    macs += 2 * C_R * S + 2 * C_R * 32
    # relation fusion and head
    C, N, inner = C_S + C_R, S + V, (C_S + C_R) // 2
    params += 2 * (C * inner + inner)
    macs += 2 * C * inner * N + inner * N * N + C * N * N
    params += C * 32 + 32 + 32 * 32 + 32 + 32 * K + K
    macs += C * 32 * N + 32 * 32 + 32 * K
    return params, macs


def test_desk_matches_hand_count():
    rep = report_complexity(desk_config())
    assert (rep.total_params, rep.total_macs) == hand_count()
    assert rep.total_flops == FLOPS_PER_MAC * rep.total_macs


def test_params_match_module_enumeration():
    cfg = desk_config()
    model = build_model(cfg, 9)
    n = sum(p.numel() for name, p in model.named_parameters() if not name.startswith(HEAD_PREFIXES))
    assert report_complexity(cfg).total_params == n


def test_video_variant_ratio():
    cfg = desk_config()
    single = report_complexity(cfg).module("rgb")[1]
    video = report_complexity(video_variant(cfg, 16)).module("rgb")[1]
    assert video == 16 * single
    assert single / video < 1 / 10


def test_disabled_self_attention_costs_nothing():
    cfg = desk_config()
    cfg.model.self_attention = False
    on = report_complexity(desk_config()).module("rgb.attention")[1]
    off = report_complexity(cfg).module("rgb.attention")[1]
    assert on - off == 2 * 32 * 64
