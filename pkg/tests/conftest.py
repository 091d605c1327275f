import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def natural_images():
    from cdlnet.corpus import estimator_corpus

    return [im / 255.0 for im in estimator_corpus()]


@pytest.fixture(scope="session")
def desk_models(request):
    from desk_models import DeskModels

    return DeskModels(request.config.cache.mkdir("cdlnet-desk-models"))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
