import pytest
import torch

from fadm.agcn import AGCNConfig
from fadm.config import Config
from fadm.denoiser import DenoiserConfig


def tiny_config(**train) -> Config:
    """A 16px model that trains in well under a second per step."""
    cfg = Config()
    cfg.data.resolution = 16
    cfg.data.n_sequences = 4
    cfg.data.seq_length = 3
    cfg.data.n_heldout = 1
    cfg.diffusion.T = 10
    m = cfg.model
    m.base_channels, m.channel_mults, m.denoiser_emb_dim = 8, [1, 2], 16
    m.cond_channels = m.appearance_channels = m.motion_channels = 4
    m.hidden, m.mlp_hidden, m.emb_dim = 8, 16, 8
    cfg.train.batch_size = 4
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture
def small_agcn_cfg():
    return AGCNConfig(exp_dim=3, pose_dim=2, appearance_channels=4, motion_channels=4, cond_channels=4,
                      hidden=6, mlp_hidden=8, emb_dim=8, resolution=16)


@pytest.fixture
def small_denoiser_cfg():
    return DenoiserConfig(base_channels=8, channel_mults=(1, 2), cond_channels=4, resolution=16,
                          emb_dim=16, zero_init_out=False)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from fadm.dataset import generate_corpus

    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(tiny_config(), root)
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus):
    from fadm.dataset import load_split

    return load_split(tiny_corpus, tiny_config(), "train")


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
