import copy
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import small_config
from mmff.checkpoint import checkpoint_bytes
from mmff.config import TrainConfig
from mmff.dataset import prepare
from mmff.errors import DataEmpty, NonFiniteLoss, UnknownVariant
from mmff.training import (EvalReport, _fit, ablation_table, build_model, evaluate, finetune_all,
                           params_digest, run_ablation, stream_parameters, train_all, train_fusion,
                           train_stream, variant_config)


@pytest.fixture(scope="module")
def tiny_data(tiny_dataset):
    cfg = small_config(tiny_dataset)
    return prepare(tiny_dataset, cfg, "train", True, seed=0), prepare(tiny_dataset, cfg, "test", False, seed=0)


def state_copy(params):
    return [p.detach().clone() for p in params]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


class TestSchedule:
    def test_default_steps_exact(self):
        t = TrainConfig()
        assert t.lr_at(0) == 1e-4 and t.lr_at(9) == 1e-4
        assert t.lr_at(10) == 1e-5
        assert t.lr_at(20) == 1e-6

    def test_formula(self):
        t = TrainConfig()
        for e in range(40):
            assert t.lr_at(e) == pytest.approx(1e-4 * 0.1 ** (e // 10), rel=1e-12)

    def test_uniform_cross_entropy_is_log_k(self):
        for K in (2, 9, 60):
            loss = F.cross_entropy(torch.zeros(5, K, dtype=torch.float64), torch.arange(5) % K)
            assert abs(loss.item() - math.log(K)) <= 1e-9


class TestFit:
    def test_zero_lr_single_step(self):
        torch.manual_seed(0)
        lin = torch.nn.Linear(4, 3)
        before = state_copy(lin.parameters())
        x = torch.randn(1, 4)
        _fit(list(lin.parameters()), lambda idx: lin(x[idx]), torch.tensor([2]), TrainConfig(lr=0.0, batch_size=1),
             1, "t", 0)
        assert same(before, lin.parameters())

    def test_non_finite_loss(self):
        w = torch.nn.Parameter(torch.zeros(3))
        with pytest.raises(NonFiniteLoss, match="epoch 0"):
            _fit([w], lambda idx: (w * float("nan")).expand(len(idx), 3), torch.zeros(4, dtype=torch.long),
                 TrainConfig(), 1, "t", 0)

    def test_empty(self):
        with pytest.raises(DataEmpty):
            _fit([torch.nn.Parameter(torch.zeros(1))], None, torch.zeros(0, dtype=torch.long), TrainConfig(), 1, "t", 0)

    def test_loss_decreases(self):
        torch.manual_seed(0)
        x = torch.randn(64, 5)
        y = (x[:, 0] > 0).long()
        lin = torch.nn.Linear(5, 2)
        hist = _fit(list(lin.parameters()), lambda idx: lin(x[idx]), y, TrainConfig(lr=1e-2, batch_size=16),
                    5, "t", 0)
        assert hist[-1].loss < hist[0].loss
        assert hist[0].line().startswith("epoch=0 stage=t lr=0.01 loss=")


class TestStages:
    def test_stream_training_excludes_fusion(self, tiny_data, small_cfg):
        train, _ = tiny_data
        model = build_model(small_cfg, train.num_classes)
        fusion = state_copy(model.fusion.parameters())
        rgb = state_copy(model.rgb.parameters())
        skel = state_copy(model.skeleton.parameters())
        hist = train_stream(model, "skeleton", train, small_cfg)
        assert len(hist) == small_cfg.train.epochs_stream
        assert same(fusion, model.fusion.parameters()) and same(rgb, model.rgb.parameters())
        assert not same(skel, model.skeleton.parameters())

    def test_fusion_freezes_streams(self, tiny_data, small_cfg):
        train, _ = tiny_data
        model = train_all(small_cfg, train, stages=(1,))
        frozen = stream_parameters(model)
        digest = params_digest(frozen)
        buffers = {k: v.clone() for k, v in model.named_buffers() if k.startswith(("skeleton", "rgb"))}
        hist = train_fusion(model, train, small_cfg)
        assert len(hist) == small_cfg.train.epochs_fusion
        assert params_digest(frozen) == digest
        assert all(torch.equal(v, dict(model.named_buffers())[k]) for k, v in buffers.items())
        assert all(not p.requires_grad for p in frozen)

    def test_zero_fusion_epochs(self, tiny_data, tiny_dataset):
        train, _ = tiny_data
        cfg = small_config(tiny_dataset, epochs_fusion=0)
        model = build_model(cfg, train.num_classes)
        init = copy.deepcopy(model.fusion.state_dict())
        assert train_fusion(model, train, cfg) == []
        assert all(torch.equal(v, model.fusion.state_dict()[k]) for k, v in init.items())

    def test_finetune_zero_lr(self, tiny_data, tiny_dataset):
        train, _ = tiny_data
        cfg = small_config(tiny_dataset, finetune_lr_scale=0.0)
        model = build_model(cfg, train.num_classes)
        before = state_copy(model.parameters())
        finetune_all(model, train, cfg)
        assert same(before, model.parameters())

    def test_finetune_reaches_streams_and_fusion(self, tiny_data, small_cfg):
        train, _ = tiny_data
        model = build_model(small_cfg, train.num_classes)
        train_fusion(model, train, small_cfg)
        finetune_all(model, train, small_cfg)
        # gradients of the last fine-tuning batch are still attached
        grads = {n: 0.0 if p.grad is None else p.grad.abs().sum().item() for n, p in model.named_parameters()}
        assert any(v > 0 for k, v in grads.items() if k.startswith("skeleton."))
        assert any(v > 0 for k, v in grads.items() if k.startswith("rgb."))
        assert any(v > 0 for k, v in grads.items() if k.startswith("fusion."))


class TestDeterminism:
    def test_two_runs_identical(self, tiny_data, small_cfg):
        train, _ = tiny_data
        logs = []
        blobs = []
        for _ in range(2):
            log = []
            model = train_all(small_cfg, train, sink=log.append)
            logs.append([e.line() for e in log])
            blobs.append(checkpoint_bytes(model, small_cfg, 3))
        assert logs[0] == logs[1]
        assert blobs[0] == blobs[1]

    def test_prepare_deterministic(self, tiny_dataset, small_cfg):
        a = prepare(tiny_dataset, small_cfg, "train", True, seed=5)
        b = prepare(tiny_dataset, small_cfg, "train", True, seed=5)
        assert torch.equal(a.skeletons, b.skeletons) and torch.equal(a.images, b.images)
        aug = small_cfg.augment
        assert len(a) == (1 + aug.n_rot + aug.n_scale) * 36  # original plus augmented copies


class TestEvalReport:
    def test_perfect(self):
        labels = [0, 1, 2, 2, 1, 0]
        rep = EvalReport.from_predictions(labels, labels, 3)
        assert rep.accuracy == 1.0
        assert np.array_equal(rep.confusion, np.diag([2, 2, 2]))

    def test_random_k4(self):
        g = np.random.default_rng(0)
        labels = g.integers(0, 4, 1000)
        rep = EvalReport.from_predictions(g.integers(0, 4, 1000), labels, 4)
        assert 0.20 <= rep.accuracy <= 0.30
        assert rep.confusion.sum(axis=1).tolist() == np.bincount(labels, minlength=4).tolist()

    def test_trace_over_total(self, rng):
        labels, pred = rng.integers(0, 5, 37), rng.integers(0, 5, 37)
        rep = EvalReport.from_predictions(pred, labels, 5)
        assert rep.accuracy == np.trace(rep.confusion) / rep.total
        d = rep.to_dict()
        assert d["correct"] == int(np.trace(rep.confusion)) and len(d["per_class_accuracy"]) == 5

    def test_missing_class_is_nan(self):
        rep = EvalReport.from_predictions([0, 0], [0, 0], 2)
        assert math.isnan(rep.per_class[1]) and rep.to_dict()["per_class_accuracy"] == [1.0, None]

    def test_empty(self, tiny_data, small_cfg):
        with pytest.raises(DataEmpty):
            EvalReport.from_predictions([], [], 3)
        train, _ = tiny_data
        model = build_model(small_cfg, train.num_classes)
        with pytest.raises(DataEmpty):
            evaluate(model, train.subset([]))

    def test_family_accuracy(self, tiny_data, small_cfg):
        _, test = tiny_data
        rep = evaluate(build_model(small_cfg, test.num_classes), test)
        assert set(rep.extra["family_accuracy"]) == {"A", "B", "C"}


class TestVariants:
    @pytest.mark.parametrize("name", ["nope", "frames=4", "fraction=1.5", "fraction=x", "alpha=3"])
    def test_unknown(self, name, small_cfg):
        with pytest.raises(UnknownVariant):
            variant_config(name, small_cfg)

    def test_frame_count_three(self, small_cfg):
        cfg, head = variant_config("frames=3", small_cfg)
        assert cfg.frame_fractions == (0.3, 0.5, 0.7) and head == "fusion"

    def test_base_untouched(self, small_cfg):
        before = small_cfg.to_ini()
        for v in ("no_self_attn", "no_skel_attn", "decision", "rgb_only", "no_enhancement"):
            variant_config(v, small_cfg)
        assert small_cfg.to_ini() == before

    def test_one_row(self, tiny_dataset, small_cfg):
        rows = run_ablation(tiny_dataset, ["skeleton_only"], small_cfg)
        assert len(rows) == 1 and rows[0]["variant"] == "skeleton_only"
        table = ablation_table(rows).splitlines()
        assert len(table) == 2 and table[0].split("\t")[:3] == ["variant", "accuracy", "total"]

    def test_unknown_fails_before_training(self, tiny_dataset, small_cfg):
        with pytest.raises(UnknownVariant):
            run_ablation(tiny_dataset, ["full", "bogus"], small_cfg)
