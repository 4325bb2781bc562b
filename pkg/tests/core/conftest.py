import pytest
import warnings

from canids.tools.builder import (
    toy_detector_pair,
)


@pytest.fixture(autouse=True)
def show_all_warnings():
    warnings.simplefilter("always")


@pytest.fixture(scope="session")
def pair():
    return toy_detector_pair(seed=0)
