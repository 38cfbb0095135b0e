import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from axnn.modelio import generate_fixture  # noqa: E402


@pytest.fixture(scope="session")
def tiny_fixture():
    return generate_fixture(7, "tiny")


@pytest.fixture(scope="session")
def resnet8_fixture():
    return generate_fixture(7, "resnet8")
