import itertools

import numpy as np
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(20211015)


@pytest.fixture
def criterion():
    """Record one acceptance verdict line and assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def naive_reconstruct(factors):
    dims = tuple(U.shape[0] for U in factors)
    R = factors[0].shape[1]
    out = np.zeros(dims)
    for idx in itertools.product(*[range(d) for d in dims]):
        total = 0.0
        for r in range(R):
            term = 1.0
            for n, i in enumerate(idx):
                term *= factors[n][i, r]
            total += term
        out[idx] = total
    return out


def random_cp_tensor(rng, dims, rank, noise=0.0):
    factors = [rng.uniform(size=(d, rank)) for d in dims]
    X = np.einsum("ir,jr,kr->ijk", *factors) if len(dims) == 3 else naive_reconstruct(factors)
    if noise:
        E = rng.standard_normal(X.shape)
        X = X + noise * np.linalg.norm(X) / np.linalg.norm(E) * E
    return X, factors


def rel(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.linalg.norm(b)
    return np.linalg.norm(a - b) / (denom if denom else 1.0)
