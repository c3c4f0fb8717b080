import numpy as np
import pytest
import torch

from degradiff.encoder import EncoderConfig
from degradiff.scorenet import ScoreNetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return ScoreNetConfig(base_channels=8, channel_multipliers=(1, 2), blocks_per_resolution=1,
                          mid_blocks=2, embed_dim=32)


@pytest.fixture
def small_encoder():
    return EncoderConfig(embed_dim=32, feature_dim=16, hidden_dim=16, branch_dim=8)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
