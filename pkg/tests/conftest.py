import numpy as np
import pytest

from untl.data import DEV, TRAIN, SyntheticSpec, generate_synthetic, save_generated
from untl.encoder import EncoderParams, Vocab, tokenize
from untl.training import TrainConfig, TrainingData


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_vocab():
    """Vocabulary with a handful of ordinary words"""
    return Vocab.build("the cat sat on a mat dog ran here this password key".split())


@pytest.fixture
def small_params(small_vocab):
    return EncoderParams.init(len(small_vocab), d=8, num_classes=3, seed=3)


@pytest.fixture
def small_sequences(small_vocab):
    return [tokenize(text, small_vocab) for text in ("the cat sat", "a dog ran on the mat", "the mat", "cat")]


@pytest.fixture(scope='session')
def tiny_spec():
    return SyntheticSpec(signal_tokens_per_class=4, marker_tokens_per_domain=6, noise_tokens=20, seq_len=10,
                         train_size=60, dev_size=30, test_size=30, seed=5)


@pytest.fixture(scope='session')
def tiny_data(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def training_data(tiny_data):
    return TrainingData(vocab=tiny_data.vocab,
                        source_train=tiny_data.source[TRAIN], source_dev=tiny_data.source[DEV],
                        target_train=tiny_data.target[TRAIN], target_dev=tiny_data.target[DEV])


@pytest.fixture
def data_dir(tmp_path, tiny_data):
    out = tmp_path / 'data'
    save_generated(tiny_data, out)
    return out


@pytest.fixture
def fast_config():
    """A few dozen steps on a small encoder"""
    def make(mode='untl', **overrides):
        values = dict(mode=mode, d_model=16, batch_size=10, epochs=2, eval_every=4, seed=7)
        if mode == 'prompt':
            values['prompt_text'] = 'here this a password key'
        if mode == 'adapter':
            values['adapter_width'] = 4
        values.update(overrides)
        return TrainConfig(**values)
    return make
