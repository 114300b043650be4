import numpy as np
import pytest

from cdmil.mil import ModelParams

# acceptance results collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_params(rng, d_e, d_h, K, C, scale=0.5):
    return ModelParams(
        scale * rng.standard_normal((K, d_h, d_e)),
        scale * rng.standard_normal((K, d_h, d_e)),
        scale * rng.standard_normal((d_h, d_e)),
        scale * rng.standard_normal((d_h, 2 * d_h)),
        scale * rng.standard_normal((C, d_h)),
    )


def random_batch(rng, B, N, d_e, min_n=1):
    z = rng.standard_normal((B, d_e))
    X = np.zeros((B, N, d_e))
    mask = np.zeros((B, N))
    p = np.zeros((B, N))
    for b in range(B):
        n = int(rng.integers(min_n, N + 1))
        X[b, :n] = rng.standard_normal((n, d_e))
        mask[b, :n] = 1
        s = rng.uniform(0.05, 1.0, n)
        p[b, :n] = s / s.sum()
    return z, X, mask, p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
