import pytest
import torch
from hypothesis import settings

from sfd.config import RunConfig
from sfd.data import make_synthetic_corpus

settings.register_profile("sfd", deadline=None, derandomize=True)
settings.load_profile("sfd")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    make_synthetic_corpus(d, n=20, size=96, seed=0)
    return d


@pytest.fixture(scope="session")
def heldout_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("heldout")
    make_synthetic_corpus(d, n=20, size=96, seed=1000)
    return d


@pytest.fixture
def small_cfg(corpus_dir, tmp_path):
    """Cheap config for plumbing tests: short run, small batch."""
    return RunConfig().replace(
        data={"hr_dir": str(corpus_dir), "batch_size": 2},
        generator={"num_blocks": 1, "num_features": 16, "growth_channels": 8},
        run={"steps": 4, "pretrain_steps": 2, "checkpoint_interval": 3, "output_dir": str(tmp_path / "run")},
    )
