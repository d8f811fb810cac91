import numpy as np
import pytest
import torch

from slicebridge import data
from slicebridge.schedule import build_schedule


@pytest.fixture(scope="session")
def sched10():
    return build_schedule(10, 1.0)


@pytest.fixture(scope="session")
def sched100():
    return build_schedule(100, 1.0)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Four tiny subjects, two families, 16x16, 8 positions each."""
    params = data.PhantomParams(n_subjects=4, slices_per_subject=8,
                                image_size=16, families=2)
    return data.generate_corpus(params, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
