import numpy as np
import pytest

from ctpseg import phantom
from ctpseg.config import TrainConfig


@pytest.fixture(scope="session")
def tiny_spec():
    return phantom.PhantomSpec(dims=(3, 32, 32))


@pytest.fixture(scope="session")
def tiny_case(tiny_spec):
    return phantom.generate_case(tiny_spec, np.random.default_rng(7), "case_0000")


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, tiny_spec):
    """5-case corpus on disk: 3 train, 1 val, 1 test."""
    root = tmp_path_factory.mktemp("corpus")
    phantom.generate_corpus(root, 5, 11, tiny_spec)
    return root


@pytest.fixture()
def small_cfg():
    return TrainConfig(
        batch_size=2,
        epochs=4,
        lr_decay_epoch=2,
        crop_size=(32, 32),
        base_ch=4,
        depth=2,
        seed=0,
    )
