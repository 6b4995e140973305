import re

import numpy as np
import pytest

from dyirma.trace import ChainTrace

_ACCEPTANCE = {}


def make_trace(alpha, beta, gamma, kind="ind", sigma2=None, rho=None, perm=None, selected=None,
               cov=None, chain_id=0):
    """Build a ChainTrace from per-iteration arrays (2-d, iteration first)."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    R, n = alpha.shape
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=np.int8))
    if perm is None:
        perm = np.tile(np.arange(n), (R, 1))
    if selected is None:
        selected = np.zeros((R, n), dtype=np.int64)
    if kind != "uns" and sigma2 is None:
        sigma2 = np.ones(R)
    if kind in ("cs", "ar1", "tri") and rho is None:
        rho = np.full(R, 0.5)
    return ChainTrace(kind=kind, iteration=np.arange(1, R + 1), alpha=alpha, beta=beta,
                      gamma=gamma, perm=np.asarray(perm, dtype=np.int64),
                      selected=np.asarray(selected, dtype=np.int64),
                      sigma2=None if sigma2 is None else np.asarray(sigma2, dtype=float),
                      rho=None if rho is None else np.asarray(rho, dtype=float),
                      cov=cov, chain_id=chain_id)


@pytest.fixture
def trace_factory():
    return make_trace


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or report.outcome != "passed":
        ok = report.outcome == "passed"
        _ACCEPTANCE[key] = _ACCEPTANCE.get(key, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), ok in sorted(_ACCEPTANCE.items()):
        terminalreporter.write_line(f"criterion {num} {name}: {'PASS' if ok else 'FAIL'}")
