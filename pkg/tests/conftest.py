import numpy as np
import pytest

from revlab.demo import demo_corpus
from revlab.model import ModelConfig


@pytest.fixture(scope="session")
def corpus():
    return demo_corpus()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(vocab_size=7, pos_mode="rotary", tie=False, **kw):
    base = dict(d_model=8, n_heads=2, n_layers=2, max_len=12)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, pos_mode=pos_mode, tie_embeddings=tie, **base)
