import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scripts"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def output_dir(tmp_path):
    path = tmp_path / "results"
    path.mkdir()
    return path
