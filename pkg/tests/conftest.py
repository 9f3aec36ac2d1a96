import numpy as np
import pytest

ACCEPTANCE = {}


def record(number, passed, detail):
    """Store one acceptance outcome for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def inside_ball(rng, n, radius=1.0):
    x = rng.normal(size=(n, 3))
    return x * (radius * rng.uniform(size=n) ** (1 / 3) / np.linalg.norm(x, axis=1))[:, None]


def unit_vectors(rng, n):
    w = rng.normal(size=(n, 3))
    return w / np.linalg.norm(w, axis=1, keepdims=True)
