import numpy as np
import pytest

from lsapc.model import Dataset, LsapcConfig, ModelState


def make_data(n=30, p=5, noise=0.5, seed=0, beta=None):
    rng = np.random.default_rng(seed)
    if beta is None:
        beta = np.zeros(p)
        beta[1:3] = [2.0, 1.5]
    X = rng.normal(size=(n, len(beta)))
    y = X @ beta + noise * rng.normal(size=n)
    return Dataset(y, X)


def random_state(p, rng, positive=False):
    beta = rng.normal(size=p)
    if positive:
        beta = np.abs(beta)
    return ModelState(
        beta=beta,
        sigma=float(rng.gamma(2.0, 1.0)),
        tau=rng.gamma(2.0, 1.0, size=p),
        l=rng.normal(-0.5, 0.5, size=p - 1),
        psi=rng.gamma(2.0, 1.0, size=p - 1),
    )


@pytest.fixture
def small_data():
    return make_data()


@pytest.fixture
def proper_cfg():
    # proper, moderately informative priors keep small-sample tests stable
    return LsapcConfig(a=1.0, b=1.0, c=1.0, d=1.0, l0=-0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
