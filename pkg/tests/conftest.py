import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mope.backbone import BackboneConfig, init_backbone
from mope.corpus import build_vocab, corpus_texts, generate_synthetic

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    """Schema, train and test dialogues from a small seeded synthetic corpus."""
    return generate_synthetic(1, 24, n_test=9)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    schema, train, test = small_corpus
    return build_vocab(corpus_texts(schema, train + test))


@pytest.fixture(scope="session")
def tiny_config(small_vocab):
    return BackboneConfig(vocab_size=len(small_vocab), d_model=16, n_layers=2, n_heads=2,
                          d_ff=32, max_context=128, prefix_len=4)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_config):
    return init_backbone(tiny_config, 0).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
