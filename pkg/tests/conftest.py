import numpy as np
import pytest

from gaga.graphs import VocabSpec, synth_tag


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_tag():
    """Dense little 3-class graph shared by read-only tests."""
    return synth_tag(3, 20, 0.3, 0.05, VocabSpec(words_per_text=12), seed=99)
