"""Shared pytest fixtures for unit tests."""

import numpy as np
import pytest


@pytest.fixture
def random_unit_rows():
    """Factory fixture drawing seeded unit-norm rows."""

    def _make(rows, dim, seed=0):
        x = np.random.default_rng(seed).standard_normal((rows, dim))
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    return _make
