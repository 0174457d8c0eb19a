import numpy as np
import pytest


def central_difference(fun, x, eps=1e-6):
    """Central finite difference of a (possibly complex, array-valued) function."""
    return (fun(x + eps) - fun(x - eps)) / (2 * eps)


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(np.asarray(b)), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(20221)


@pytest.fixture(scope="session")
def small_manifold():
    from ltesounder.manifold import StackedUCA, stacked_uca_manifold
    return stacked_uca_manifold(StackedUCA(rings=2, per_ring=4), n_az=9, n_el=7, grid=(32, 16))


@pytest.fixture(scope="session")
def default_manifold():
    from ltesounder.manifold import stacked_uca_manifold
    return stacked_uca_manifold()


# acceptance verdicts are collected here and repeated in the terminal summary,
# so they show even when pytest captures output
VERDICTS = []


@pytest.fixture
def verdict():
    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
        VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
