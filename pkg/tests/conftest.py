import numpy as np
import pytest

from tryon import data


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    return data.synth_fixture(seed=101, n_identities=4, n_poses=2, size=64, root=root)


@pytest.fixture(scope="session")
def manifest(fixture_root):
    return data.build_manifest(fixture_root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
