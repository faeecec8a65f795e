import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _clean_graph():
    from promptcl import autodiff as ad
    ad.current_graph().clear()
    yield
    ad.current_graph().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
