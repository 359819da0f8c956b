import pytest

from tbigan.datasets import select_labeled_subset, synthetic_shapes
from tbigan.models import ArchitectureConfig


@pytest.fixture(scope="session")
def tiny_split():
    return synthetic_shapes(3, 30, 16, seed=7)


@pytest.fixture(scope="session")
def tiny_index(tiny_split):
    return select_labeled_subset(tiny_split, 5, seed=1)


@pytest.fixture
def tiny_arch():
    return ArchitectureConfig.tiny(8)
