import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tfelab.acceptance import reference_forms, reference_profile  # noqa: E402


@pytest.fixture(scope="session")
def profile():
    return reference_profile()


@pytest.fixture(scope="session")
def forms():
    return reference_forms(64)


@pytest.fixture(scope="session")
def forms32():
    return reference_forms(32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
