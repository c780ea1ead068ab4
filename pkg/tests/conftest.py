import pytest
import torch

from jointdiff.backbone import BackboneConfig, build_ps_unet
from jointdiff.schedule import build_schedule
from jointdiff.synth_data import corpus_captions
from jointdiff.text_codec import build_vocab, train_embeddings

# miniature backbone for gradient checks and structural tests
MINI_CFG = BackboneConfig(
    embed_dim=16, n_shared=2, n_image_down=1, n_image_up=1,
    n_text_down=1, n_text_up=1, patch_size=8, image_channels=3,
    image_hw=32, n_heads=2, text_len=4, vocab_size=8,
)


@pytest.fixture(scope="session")
def sched():
    return build_schedule(1000, 0.00085, 0.012)


@pytest.fixture(scope="session")
def sched_small():
    return build_schedule(20, 0.01, 0.1)


@pytest.fixture(scope="session")
def mini_model():
    return build_ps_unet(MINI_CFG, seed=7)


@pytest.fixture(scope="session")
def vocab():
    return build_vocab(corpus_captions())


@pytest.fixture(scope="session")
def table(vocab):
    return train_embeddings(vocab, corpus_captions(), seed=0, embed_dim=128, epochs=2)


@pytest.fixture(scope="session")
def mini_table():
    mini_vocab = build_vocab(corpus_captions(), word_dim=8)
    return train_embeddings(mini_vocab, corpus_captions(), seed=0,
                            embed_dim=16, epochs=1)
