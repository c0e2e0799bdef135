import numpy as np
import pytest

from cclm.data import CorpusSpec, build_corpus
from cclm.model import CclmConfig

TINY = CclmConfig(img_layers=1, txt_layers=1, fusion_layers=1, d=16, num_heads=2, ffn_dim=32, proj_dim=8)


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(0, CorpusSpec(n_train=32, n_dev=8, n_test=16, n_parallel=32))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
