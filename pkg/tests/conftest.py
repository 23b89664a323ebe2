import numpy as np
import pytest


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def assert_gradients_match(analytic, numeric, rtol=1e-4, atol=1e-7):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    err = np.abs(analytic - numeric)
    bound = np.maximum(rtol * np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    worst = np.max(err / bound) if err.size else 0.0
    assert np.all(err <= bound), f"gradient mismatch, worst error/bound = {worst:.3g}"


def random_spd(rng, m, cond=None):
    A = rng.standard_normal((m, m))
    return A @ A.T + m * np.eye(m)


def random_lower(rng, m):
    L = np.tril(rng.standard_normal((m, m)), k=-1) * 0.5
    L[np.diag_indices(m)] = rng.uniform(0.5, 2.0, size=m)
    return L


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
