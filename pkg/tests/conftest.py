import numpy as np
import pytest
import torch

from mmff.synthdata import SynthSpec, generate_dataset

torch.set_default_dtype(torch.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    """All three families, a handful of samples each."""
    return SynthSpec(train_per_class=4, test_per_class=2, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_spec):
    return generate_dataset(tiny_spec, tmp_path_factory.mktemp("synth") / "tiny")


@pytest.fixture(scope="session")
def clean_dataset(tmp_path_factory):
    """Noise-free dataset for the single-modality oracles."""
    spec = SynthSpec(train_per_class=6, test_per_class=6, noise=0.0, seed=11)
    return generate_dataset(spec, tmp_path_factory.mktemp("synth") / "clean")


def small_config(dataset="", **train):
    """Desk config shrunk so a full three-stage run takes a few seconds."""
    from mmff.config import desk_config
    cfg = desk_config(str(dataset))
    m = cfg.model
    m.gcn_channels, m.gcn_strides = (8, 8), (1, 2)
    m.cnn_channels, m.attn_dim, m.head_channels, m.head_hidden = (4, 8), 8, 8, 8
    cfg.augment.n_rot = cfg.augment.n_scale = 1
    t = cfg.train
    t.epochs_stream, t.epochs_fusion, t.epochs_finetune = 2, 3, 1
    for k, v in train.items():
        setattr(t, k, v)
    return cfg


@pytest.fixture
def small_cfg(tiny_dataset):
    return small_config(tiny_dataset)


ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance line: ``criterion(n, "summary")`` then run the checks."""
    state = {}

    def record(n, summary):
        state.update(n=n, summary=summary)

    yield record
    if "n" in state:
        failed = getattr(request.node, "rep_call", None)
        ok = failed is not None and failed.passed
        ACCEPTANCE[state["n"]] = f"criterion {state['n']:2d}: {'PASS' if ok else 'FAIL'}  {state['summary']}"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
