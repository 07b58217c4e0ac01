import numpy as np
import pytest

from meter_desk.config import build_run_config
from meter_desk.datagen import generate_corpus
from meter_desk.trainer import run_vocabulary

# A model small enough that a forward/backward pass takes milliseconds.
TINY = {
    "text.hidden": "16", "text.heads": "2", "text.layers": "1", "text.ffn_mult": "2.0",
    "vision.hidden": "16", "vision.heads": "2", "vision.layers": "1", "vision.ffn_mult": "2.0",
    "fusion.hidden": "16", "fusion.heads": "2", "fusion.ffn_mult": "2.0",
    "fusion.coattn_depth": "1", "fusion.dec_layers": "1",
    "data.corpus_size": "8", "data.codebook_k": "8", "data.codebook_iters": "5",
    "train.batch_size": "4", "train.steps": "4", "train.eval_every": "2",
    "finetune.steps": "2", "finetune.batch_size": "4",
    "bench.repeats": "3", "bench.warmup": "0",
}


def tiny_config(**overrides):
    """Toy-preset RunConfig shrunk to TINY; keyword keys use '__' for '.' (fusion__kind='merged')."""
    pairs = dict(TINY)
    pairs.update({key.replace("__", "."): str(value) for key, value in overrides.items()})
    return build_run_config(pairs)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(0, 8, 32, with_qa=True)


@pytest.fixture(scope="session")
def vocab(corpus):
    return run_vocabulary(corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def make_config():
    return tiny_config
