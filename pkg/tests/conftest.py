import numpy as np
import pytest

from covreg.model import Dataset, Params


def pytest_addoption(parser):
    parser.addoption("--regen-goldens", action="store_true", help="rewrite golden files instead of comparing")


@pytest.fixture
def regen_goldens(request):
    return request.config.getoption("--regen-goldens")


def random_spd(rng, p, floor=0.3):
    M = rng.standard_normal((p, p))
    return M @ M.T / p + floor * np.eye(p)


def random_params(rng, p=2, q=2, q_m=None, rank=1, scale=1.0):
    q_m = q if q_m is None else q_m
    return Params(
        A=rng.standard_normal((p, q_m)),
        Bs=tuple(scale * rng.standard_normal((p, q)) for _ in range(rank)),
        Psi=random_spd(rng, p),
    )


def simulate(params, X, rng, W=None):
    """Draw responses from the random-effects form with an independent code path."""
    W = X if W is None else W
    n = X.shape[0]
    Y = W @ params.A.T + rng.standard_normal((n, params.p)) @ np.linalg.cholesky(params.Psi).T
    for B in params.Bs:
        Y += rng.standard_normal(n)[:, None] * (X @ B.T)
    return Y


def random_dataset(rng, params, n, W=None):
    X = np.column_stack([np.ones(n), rng.uniform(-1, 1, (n, params.q - 1))])
    if W is None and params.q_m != params.q:
        W = np.column_stack([np.ones(n), rng.uniform(-1, 1, (n, params.q_m - 1))])[:, : params.q_m]
    return Dataset(Y=simulate(params, X, rng, W), X=X, W=W)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
