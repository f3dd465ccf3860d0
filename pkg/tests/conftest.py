import math

import numpy as np
import pytest

from spinebranch.models import make_compact_beta_bbm, make_inward_ou_quadratic, make_outward_ou_constant


@pytest.fixture(scope="session")
def inward():
    return make_inward_ou_quadratic(1.0, 2.0, 1.0, 0.5)


@pytest.fixture(scope="session")
def outward():
    return make_outward_ou_constant(1.0, 0.5, 1.0)


@pytest.fixture(scope="session")
def outward_sub():
    return make_outward_ou_constant(1.0, 2.0, 1.0)


@pytest.fixture(scope="session")
def compact():
    return make_compact_beta_bbm(1.0, 1.0)


def within_se(mean, se, target, k=3.0):
    return abs(mean - target) <= k * se


def mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))
