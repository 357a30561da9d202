import numpy as np
import pytest


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_orthonormal(rng, n, k):
    q, _ = np.linalg.qr(crandn(rng, n, k))
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
