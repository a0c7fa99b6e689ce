import contextlib
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=40, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def max_rel_error(a, n, floor=1e-8):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# -- acceptance bookkeeping ---------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records PASS/FAIL for the summary."""

    @contextlib.contextmanager
    def record(number, title):
        note = {}
        t0 = time.perf_counter()
        try:
            yield note
        except BaseException as exc:
            msg = str(exc).strip().splitlines()
            note["error"] = f"{type(exc).__name__}: {msg[0] if msg else ''}"
            ACCEPTANCE[number] = ("FAIL", title, time.perf_counter() - t0, note)
            raise
        ACCEPTANCE[number] = ("PASS", title, time.perf_counter() - t0, note)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, seconds, note = ACCEPTANCE[number]
        extra = " ".join(f"{k}={v}" for k, v in note.items())
        terminalreporter.write_line(f"criterion {number}: {status} {title} ({seconds:.1f}s) {extra}".rstrip())
