import numpy as np
import pytest

from cipherspike import CkksContext, CkksParams, gen_fixture


@pytest.fixture(scope="session")
def small_params():
    return CkksParams(n=512, depth=5, scale_bits=32, q0_bits=42,
                      special_bits=50)


@pytest.fixture(scope="session")
def small_ctx(small_params):
    return CkksContext(small_params, seed=7)


@pytest.fixture(scope="session")
def assets(tmp_path_factory):
    """The tiny differential-test fixture: calibrated weights, 100 inputs
    with comfortable class margins, golden trace."""
    out = tmp_path_factory.mktemp("fixture")
    return gen_fixture(42, out, count=100)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
