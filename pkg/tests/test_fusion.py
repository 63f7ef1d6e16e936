import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmff.errors import ShapeMismatch, ZeroVector
from mmff.fusion import (LEAKY_SLOPE, DecisionFusion, GCNFusionHead, LSTMFusion, MMFFFusion, SumFusion,
                         build_combined, decision_fusion, gcn_fusion_head, l2_normalize, lstm_fusion,
                         relation_fusion, sum_fusion)
from mmff.testing import gradient_check

D = torch.float64


def t(a):
    return torch.tensor(np.asarray(a, dtype=np.float64))


def zero_(module):
    for p in module.parameters():
        p.data.zero_()
    return module


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    return [v / sum(e) for v in e]


def linear(W, b, x):
    return [sum(W[o][i] * x[i] for i in range(len(x))) + b[o] for o in range(len(W))]


class TestLSTMFusion:
    def test_unit_norm_input_unchanged(self):
        x = t([0.6, 0.0, 0.0, 0.8])
        assert torch.allclose(l2_normalize(x), x, atol=1e-12, rtol=0)

    @given(arrays(np.float64, 3, elements=st.floats(-5, 5)), arrays(np.float64, 4, elements=st.floats(-5, 5)),
           st.floats(1e-3, 1e3))
    @settings(max_examples=50)
    def test_scale_invariance(self, a, b, lam):
        if not (np.any(a) or np.any(b)) or np.linalg.norm(np.concatenate([a, b])) < 1e-3:
            return
        torch.manual_seed(0)
        head = LSTMFusion(3, 4, 5, hidden=6).double()
        ref = lstm_fusion(t(a), t(b), head).scores
        out = lstm_fusion(t(a) * lam, t(b) * lam, head).scores
        assert (out - ref).abs().max() <= 1e-6

    def test_scalar_oracle(self):
        head = LSTMFusion(2, 2, 2, hidden=2).double()
        W1, b1 = [[1.0, -2.0, 0.5, 0.0], [0.3, 0.3, -1.0, 2.0]], [0.1, -0.2]
        W2, b2 = [[1.0, 0.5], [-0.5, 1.0]], [0.0, 0.3]
        W3, b3 = [[2.0, -1.0], [0.0, 1.0]], [0.5, 0.0]
        for lin, (W, b) in zip((head.fc1, head.fc2, head.fc3), ((W1, b1), (W2, b2), (W3, b3))):
            lin.weight.data, lin.bias.data = t(W), t(b)
        x = [0.3, -1.2, 2.0, 0.4]
        n = math.sqrt(sum(v * v for v in x))
        h = [v if v > 0 else LEAKY_SLOPE * v for v in linear(W1, b1, [v / n for v in x])]
        s = linear(W3, b3, linear(W2, b2, h))
        out = lstm_fusion(t(x[:2]), t(x[2:]), head)
        assert np.abs(out.scores.detach().numpy() - s).max() <= 1e-12
        assert np.abs(out.probs.detach().numpy() - softmax(s)).max() <= 1e-12

    def test_zero_vector(self):
        head = LSTMFusion(2, 2, 3)
        with pytest.raises(ZeroVector):
            head(torch.zeros(1, 2), torch.zeros(1, 2))


def combined_oracle(Fg, Fr):
    """Scalar-loop construction of the combined feature for one sample."""
    C_S, T, V = Fg.shape
    C_R, S = Fr.shape
    skel = [[max(Fg[c, k, v] for k in range(T)) for v in range(V)] for c in range(C_S)]
    f_gcn = [sum(skel[c]) / V for c in range(C_S)]
    f_rgb = [sum(Fr[c]) / S for c in range(C_R)]
    out = np.zeros((C_R + C_S, S + V))
    for col in range(S):
        for c in range(C_R):
            out[c, col] = Fr[c, col]
        for c in range(C_S):
            out[C_R + c, col] = f_gcn[c]
    for v in range(V):
        for c in range(C_R):
            out[c, S + v] = f_rgb[c]
        for c in range(C_S):
            out[C_R + c, S + v] = skel[c][v]
    return out


class TestBuildCombined:
    def test_shape(self):
        out = build_combined(torch.randn(2, 16, 6, 10), torch.randn(2, 32, 64))
        assert out.shape == (2, 16 + 32, 64 + 10)

    def test_constant_skeleton(self):
        out = build_combined(torch.full((2, 3, 5), 1.5), torch.randn(4, 6))
        assert torch.all(out[4:, :6] == 1.5)

    def test_scalar_oracle(self, rng):
        Fg, Fr = rng.normal(size=(2, 3, 2)), rng.normal(size=(3, 4))
        out = build_combined(t(Fg), t(Fr)).numpy()
        assert out.shape == (5, 6)
        assert np.abs(out - combined_oracle(Fg, Fr)).max() <= 1e-12

    def test_bad_shapes(self):
        with pytest.raises(ShapeMismatch):
            build_combined(torch.zeros(2, 3, 4, 5), torch.zeros(3, 3, 4))


def rel_weights(C, Cp, rng, scale=1.0):
    return [t(rng.normal(scale=scale, size=s)) for s in ((Cp, C), (Cp,), (Cp, C), (Cp,))]


class TestRelationFusion:
    def test_zero_weights_uniform(self, rng):
        F_com = t(rng.normal(size=(5, 7)))
        out, M = relation_fusion(F_com, *(torch.zeros_like(w) for w in rel_weights(5, 2, rng)))
        assert torch.allclose(M, torch.full((7, 7), 1 / 7, dtype=D), atol=1e-15, rtol=0)
        mean = F_com.mean(dim=1, keepdim=True).expand(-1, 7)
        assert torch.allclose(out, mean, atol=1e-12, rtol=0)

    def test_scalar_oracle(self):
        F_com = np.array([[1.0, -0.5, 2.0], [0.3, 0.8, -1.0], [0.0, 1.5, 0.5]])
        tw, tb = np.array([[0.5, -1.0, 0.2], [0.1, 0.4, -0.3]]), np.array([0.1, 0.0])
        pw, pb = np.array([[-0.2, 0.3, 1.0], [0.7, 0.0, 0.5]]), np.array([0.0, -0.2])
        N = 3
        th = [[sum(tw[o, c] * F_com[c, n] for c in range(3)) + tb[o] for n in range(N)] for o in range(2)]
        ph = [[sum(pw[o, c] * F_com[c, n] for c in range(3)) + pb[o] for n in range(N)] for o in range(2)]
        M = [softmax([sum(th[o][i] * ph[o][j] for o in range(2)) for j in range(N)]) for i in range(N)]
        ref = [[sum(F_com[c, j] * M[i][j] for j in range(N)) for i in range(N)] for c in range(3)]
        out, Mt = relation_fusion(t(F_com), t(tw), t(tb), t(pw), t(pb))
        assert np.abs(Mt.numpy() - M).max() <= 1e-12
        assert np.abs(out.numpy() - ref).max() <= 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=50)
    def test_rows_stochastic_and_convex(self, seed):
        g = np.random.default_rng(seed)
        F_com = t(g.normal(scale=3, size=(2, 6, 9)))
        out, M = relation_fusion(F_com, *rel_weights(6, 3, g, scale=2.0))
        assert (M.sum(-1) - 1).abs().max() <= 1e-6 and torch.all(M >= 0)
        lo = F_com.amin(dim=-1, keepdim=True)
        hi = F_com.amax(dim=-1, keepdim=True)
        assert torch.all(out >= lo - 1e-6) and torch.all(out <= hi + 1e-6)

    def test_permutation_equivariance(self, rng):
        F_com = t(rng.normal(size=(4, 6)))
        w = rel_weights(4, 2, rng)
        perm = torch.tensor(rng.permutation(6))
        out, M = relation_fusion(F_com, *w)
        out_p, M_p = relation_fusion(F_com[:, perm], *w)
        assert torch.allclose(out_p, out[:, perm], atol=1e-12, rtol=0)
        assert torch.allclose(M_p, M[perm][:, perm], atol=1e-12, rtol=0)

    def test_broadcast_mode(self, rng):
        F_com = t(rng.normal(size=(3, 4)))
        out, M = relation_fusion(F_com, *rel_weights(3, 2, rng), mode="broadcast")
        assert torch.allclose(out, F_com * M.mean(dim=0, keepdim=True), atol=1e-15, rtol=0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            relation_fusion(t(rng.normal(size=(3, 4))), *rel_weights(5, 2, rng))

    def test_gradients(self, rng):
        F_com = t(rng.normal(size=(1, 4, 5)))
        inputs = [F_com] + rel_weights(4, 2, rng, scale=0.5)
        fn = lambda *xs: relation_fusion(*xs)[0]  # noqa: E731
        assert gradient_check(fn, inputs) <= 1e-4


class TestGCNHead:
    def test_zero_weights_uniform(self):
        head = zero_(GCNFusionHead(6, 4, 5, 3))
        out = gcn_fusion_head(torch.randn(6, 9), head)
        assert torch.allclose(out.probs, torch.full((4,), 0.25), atol=1e-7)

    def test_scalar_oracle(self):
        head = GCNFusionHead(2, 2, conv_channels=2, hidden=2).double()
        cw, cb = [[1.0, -1.0], [0.5, 2.0]], [0.0, -0.5]
        W1, b1 = [[1.0, 0.5], [-1.0, 0.2]], [0.1, 0.0]
        W2, b2 = [[0.3, -0.7], [1.0, 1.0]], [0.0, 0.2]
        head.conv.weight.data = t(cw)[:, :, None, None]
        head.conv.bias.data = t(cb)
        head.fc1.weight.data, head.fc1.bias.data = t(W1), t(b1)
        head.fc2.weight.data, head.fc2.bias.data = t(W2), t(b2)
        F_rel = [[0.5, -1.0, 2.0], [1.0, 0.0, -0.3]]
        conv = [[max(0.0, sum(cw[o][c] * F_rel[c][n] for c in range(2)) + cb[o]) for n in range(3)]
                for o in range(2)]
        gap = [sum(r) / 3 for r in conv]
        h = [max(0.0, v) for v in linear(W1, b1, gap)]
        p = softmax(linear(W2, b2, h))
        assert np.abs(gcn_fusion_head(t(F_rel), head).probs.detach().numpy() - p).max() <= 1e-12

    def test_probabilities_sum_to_one(self):
        for k in range(100):
            torch.manual_seed(k)
            head = GCNFusionHead(4, 3, 4, 4)
            p = gcn_fusion_head(torch.randn(2, 4, 5), head).probs
            assert (p.sum(-1) - 1).abs().max() <= 1e-6

    def test_gradients(self):
        torch.manual_seed(0)
        head = GCNFusionHead(3, 2, 4, 4).double()
        names = [n for n, _ in head.named_parameters()]
        F_rel = torch.randn(2, 3, 5, dtype=D)

        def fn(x, *params):
            return torch.func.functional_call(head, dict(zip(names, params)), (x,))
        assert gradient_check(fn, [F_rel] + [p.detach() for p in head.parameters()]) <= 1e-4

    def test_mmff_end_to_end_shapes(self):
        net = MMFFFusion(8, 6, 5, conv_channels=4, hidden=4)
        scores, M = net(torch.randn(2, 8, 3, 10), torch.randn(2, 6, 16), return_mask=True)
        assert scores.shape == (2, 5) and M.shape == (2, 26, 26)


class TestBaselines:
    def test_decision_w1(self, rng):
        a, b = t(rng.normal(size=4)), t(rng.normal(size=4))
        assert torch.allclose(decision_fusion(a, b, 1.0).probs, torch.softmax(a, -1), atol=1e-15, rtol=0)

    def test_decision_identical(self, rng):
        a = t(rng.normal(size=4))
        assert torch.allclose(decision_fusion(a, a).probs, torch.softmax(a, -1), atol=1e-15, rtol=0)

    def test_decision_scalar(self, rng):
        a, b = rng.normal(size=5), rng.normal(size=5)
        pa, pb = softmax(list(a)), softmax(list(b))
        out = decision_fusion(t(a), t(b), 0.3)
        assert np.abs(out.probs.detach().numpy() - [0.3 * x + 0.7 * y for x, y in zip(pa, pb)]).max() <= 1e-12
        assert abs(out.probs.sum().item() - 1) <= 1e-12
        assert torch.allclose(torch.softmax(out.scores, -1), out.probs, atol=1e-12, rtol=0)

    def test_decision_module_uses_stream_heads(self):
        torch.manual_seed(0)
        m = DecisionFusion(3, 4, 2, w=0.5)
        fs, fr = torch.randn(2, 3), torch.randn(2, 4)
        p = torch.softmax(m(fs, fr), -1)
        expect = 0.5 * torch.softmax(m.skel_head(fs), -1) + 0.5 * torch.softmax(m.rgb_head(fr), -1)
        assert torch.allclose(p, expect, atol=1e-6)

    def test_sum_zero_rgb(self):
        torch.manual_seed(0)
        head = SumFusion(3, 4, 2, dim=5)
        fs = torch.randn(2, 3)
        ref = head.fc(head.proj_skel(fs))
        assert torch.allclose(sum_fusion(fs, torch.zeros(2, 4), head).scores, ref)

    def test_sum_symmetric(self):
        head = SumFusion(3, 3, 2, dim=4)
        head.proj_rgb.weight.data = head.proj_skel.weight.data.clone()
        a, b = torch.randn(1, 3), torch.randn(1, 3)
        assert torch.allclose(head(a, b), head(b, a), atol=1e-6)

    def test_sum_scalar(self):
        head = SumFusion(2, 1, 2, dim=2).double()
        Ps, Pr = [[1.0, 2.0], [0.0, -1.0]], [[0.5], [3.0]]
        Wf, bf = [[1.0, -1.0], [0.5, 0.5]], [0.2, 0.0]
        head.proj_skel.weight.data, head.proj_rgb.weight.data = t(Ps), t(Pr)
        head.fc.weight.data, head.fc.bias.data = t(Wf), t(bf)
        fs, fr = [0.3, -0.4], [2.0]
        z = [sum(Ps[o][i] * fs[i] for i in range(2)) + Pr[o][0] * fr[0] for o in range(2)]
        p = softmax(linear(Wf, bf, z))
        assert np.abs(sum_fusion(t(fs), t(fr), head).probs.detach().numpy() - p).max() <= 1e-12
