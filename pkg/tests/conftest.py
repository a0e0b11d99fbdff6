import numpy as np
import pytest
import torch

from atriaseg.datasets import SliceStore, make_splits
from atriaseg.phantom import PhantomConfig, generate_phantom


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom_pairs():
    return [generate_phantom(PhantomConfig(depth=8, height=64, width=64, seed=i), case_id=f"case_{i:03d}")
            for i in range(6)]


@pytest.fixture(scope="session")
def small_store(phantom_pairs):
    return SliceStore.from_pairs(phantom_pairs)


@pytest.fixture(scope="session")
def small_manifest(small_store):
    return make_splits(small_store.refs(), seed=3)
