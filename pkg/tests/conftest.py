import numpy as np
import pytest
import torch

from cdo import generate_toy_dataset, split_samples

torch.set_num_threads(max(2, torch.get_num_threads()))


@pytest.fixture(scope="session")
def toy_samples():
    return generate_toy_dataset(
        seed=7, n_train=16, n_test_normal=8, n_test_abnormal=8, resolution=64
    )


@pytest.fixture(scope="session")
def toy_train(toy_samples):
    return split_samples(toy_samples, "train")


@pytest.fixture(scope="session")
def toy_test(toy_samples):
    return split_samples(toy_samples, "test")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
