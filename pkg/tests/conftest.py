import numpy as np
import pytest

from depthreid.synthbench import generate_body, random_body_spec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def body():
    """A labelled synthetic body cloud (no normals) with its joints."""
    spec = random_body_spec(np.random.default_rng(7))
    return generate_body(spec, seed=3)


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def random_features(rng, n, centre=(0.0, 0.0, 2000.0), spread=100.0):
    """Random 6-D point+unit-normal feature rows."""
    p = rng.normal(scale=spread, size=(n, 3)) + np.asarray(centre)
    return np.hstack([p, unit_rows(rng.standard_normal((n, 3)))])


def random_congruence(rng, max_cond=100.0, n=6):
    """Invertible ``n x n`` matrix with singular values log-uniform in a band of ratio ``max_cond``."""
    q1, _ = np.linalg.qr(rng.standard_normal((n, n)))
    q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    half = 0.5 * np.log10(max_cond)
    return (q1 * 10.0 ** rng.uniform(-half, half, size=n)) @ q2
