import sys

import numpy as np
import pytest

from vehicle3d import fitter, shape_model, synthetic
from vehicle3d.mesh_core import CameraIntrinsics


@pytest.fixture(scope="session")
def template():
    return synthetic.template_mesh()


@pytest.fixture(scope="session")
def variants():
    return synthetic.variant_meshes(10, seed=0)


@pytest.fixture(scope="session")
def basis(variants):
    return shape_model.build_pca(variants, 9)


@pytest.fixture(scope="session")
def mean_prior(basis):
    return fitter.prior_from_coeffs(basis, np.zeros(basis.r))


@pytest.fixture(scope="session")
def intr():
    return CameraIntrinsics.default(640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
