import warnings

import pytest

from surveykit import synth
from surveykit.core import Codebook, split


@pytest.fixture(scope="session")
def codebook():
    return Codebook.default()


@pytest.fixture(scope="session")
def small_ds(codebook):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return synth.generate(synth.default_config(n=160, seed=5), codebook)


@pytest.fixture(scope="session")
def small_split(small_ds):
    return split(small_ds, seed=5)


@pytest.fixture(scope="session")
def train(small_split):
    return small_split[0]


@pytest.fixture(scope="session")
def validation(small_split):
    return small_split[1]
