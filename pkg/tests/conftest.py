import numpy as np
import pytest
import torch

from sefvc.audio import Waveform
from sefvc.discriminators import DiscriminatorConfig
from sefvc.model import ModelConfig
from sefvc.toydata import toy_corpus
from sefvc.trainer import TrainConfig


@pytest.fixture(autouse=True)
def _deterministic():
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def corpus():
    return toy_corpus(2, 6.0, seed=0)


@pytest.fixture
def micro_config():
    return ModelConfig(
        vocab_size=16,
        attn_dim=8,
        attn_heads=1,
        conformer_blocks_per_encoder=1,
        ff_mult=2,
        conv_kernel=3,
        max_rel_pos=4,
        upsample_initial_channel=16,
        resblock_kernel_sizes=(3,),
        resblock_dilations=(1,),
    )


@pytest.fixture
def small_config():
    return ModelConfig(vocab_size=32, attn_dim=32, attn_heads=2, upsample_initial_channel=32, resblock_kernel_sizes=(3, 5))


@pytest.fixture
def micro_disc():
    return DiscriminatorConfig(width=2)


@pytest.fixture
def fast_train():
    return TrainConfig(batch_size=1, max_content_frames=10, checkpoint_every=0, seed=3)


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance result and fail the test when it does not hold."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
