"""Shared test configuration.

BLAS thread counts are pinned before numpy loads so results are bit-stable
across runs regardless of machine core count.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, n: int, cond_scale: float = 1.0) -> np.ndarray:
    a = rng.normal(0.0, 1.0, (n, n))
    return a @ a.T + cond_scale * n * np.eye(n)
