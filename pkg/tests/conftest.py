import itertools

import numpy as np
import pytest

from tt_quotient.completion import SampleSet
from tt_quotient.tensor import TTTensor


def random_tt(rng, dims, ranks, scale=1.0):
    return TTTensor([scale * rng.standard_normal((ranks[k], dims[k], ranks[k + 1])) for k in range(len(dims))])


def naive_full(X):
    """Entry-by-entry product of core slices; independent of the library's contraction."""
    out = np.empty(X.dims)
    for idx in itertools.product(*(range(n) for n in X.dims)):
        v = np.eye(1)
        for core, i in zip(X.cores, idx):
            v = v @ core[:, i, :]
        out[idx] = v[0, 0]
    return out


def random_samples(rng, T, m):
    dims = T.shape
    lin = rng.choice(T.size, size=m, replace=False)
    idx = np.array(np.unravel_index(lin, dims)).T
    return SampleSet.from_dense(T, idx)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE: dict = {}


def record_acceptance(number: int, passed: bool, detail: str):
    ACCEPTANCE[number] = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
