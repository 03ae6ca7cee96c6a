import warnings

import numpy as np
import pytest

from lqg_lab import field as fld
from lqg_lab import measure as ms


@pytest.fixture(autouse=True)
def _quiet_embedding():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", fld.EmbeddingWarning)
        yield


def lebesgue(grid):
    return ms.LiouvilleGrid(grid, 0.0, np.full(grid.shape, grid.dx**2), 0, 0.0)


@pytest.fixture(scope="session")
def small_stack():
    grid = fld.Grid.centered(2.0, 64)
    params = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(grid))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", fld.EmbeddingWarning)
        return fld.build_stack(params, grid, 11)


@pytest.fixture(scope="session")
def small_measure(small_stack):
    return ms.build_measure(small_stack)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for res in sorted(RESULTS, key=lambda r: int(r.key[2:])):
        terminalreporter.write_line(res.line())
        for f in res.failures:
            terminalreporter.write_line(f"    - {f}")
