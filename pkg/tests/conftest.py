import json
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from einkrylov import Tensor4

DATA = Path(__file__).parent / "data" / "oracles.json"


@lru_cache(maxsize=None)
def _oracles():
    return json.loads(DATA.read_text())


def dec(d):
    if "re" in d:
        return (np.array(d["re"]) + 1j * np.array(d["im"])).reshape(d["shape"])
    return np.array(d["data"], dtype=float).reshape(d["shape"])


def tens(d, dims=None):
    """Frozen array as a Tensor4; 2-D arrays are unfoldings with ``dims``."""
    a = dec(d)
    return Tensor4(a) if dims is None else Tensor4(a, tuple(dims))


@pytest.fixture
def oracle():
    return lambda name: _oracles()[name]


def random_tensor(rng, dims):
    return Tensor4(rng.standard_normal(dims))


def random_stable(rng, n1, n2, rho=0.8):
    """Dense random operator scaled to spectral radius ``rho``."""
    n = n1 * n2
    M = rng.standard_normal((n, n))
    M *= rho / np.max(np.abs(np.linalg.eigvals(M)))
    return Tensor4(M, (n1, n2, n1, n2))


def dense(T):
    M = T.unfold() if isinstance(T, Tensor4) else T
    return M.toarray() if hasattr(M, "toarray") else np.asarray(M)


# acceptance summary: one line per criterion, printed at the end
_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        num = int(name.split("_")[2])
        detail = dict(report.user_properties).get("criterion", f"{num}: {name}").split(":", 1)[1]
        _CRITERIA[num] = ("PASS" if report.outcome == "passed" else "FAIL", detail.strip())


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, detail = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {status} ({detail})")
