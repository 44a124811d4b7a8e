import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from storefront.geometry import Box, Detection

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_box(rng, lo=0.0, hi=1.0, min_size=0.01):
    while True:
        x = np.sort(rng.uniform(lo, hi, 2))
        y = np.sort(rng.uniform(lo, hi, 2))
        if x[1] - x[0] >= min_size and y[1] - y[0] >= min_size:
            return Box(float(x[0]), float(y[0]), float(x[1]), float(y[1]))


def random_boxes(rng, n, **kw):
    return [random_box(rng, **kw) for _ in range(n)]


def det(box, score, post=None, pano="p"):
    if not isinstance(box, Box):
        box = Box(*box)
    return Detection(box, score, post, "", pano)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
