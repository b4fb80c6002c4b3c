import numpy as np
import pytest
import torch

from ctefm.corpus import synth_corpus
from ctefm.data import read_manifest
from ctefm.trainer import TrainConfig

TINY = dict(
    model_dim=16,
    n_heads=2,
    ffn_dim=32,
    n_blocks=2,
    unet_channels=(8, 16),
    time_emb_dim=8,
    sv_dims=(12, 10, 8),
    content_dim=24,
)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Three speakers, three utterances each (the last one held out)."""
    out = tmp_path_factory.mktemp("corpus")
    manifest = synth_corpus(3, 3, out, seed=7, val_fraction=0.34)
    return manifest


@pytest.fixture(scope="session")
def items(corpus):
    return read_manifest(corpus)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(batch_size=2, max_iters=4, segment_frames=32, checkpoint_every=0, **TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
