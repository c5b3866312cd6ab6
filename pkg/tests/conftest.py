import numpy as np
import pytest

from deepc_damping.plant import StateSpaceModel, simulate


def random_system(rng, n, m, p, q=0, rho=0.9, feedthrough=False, Ts=1.0):
    """Random stable model with spectral radius ``rho`` (generically minimal)."""
    A = rng.standard_normal((n, n))
    A *= rho / max(abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    D = rng.standard_normal((p, m)) if feedthrough else None
    E = rng.standard_normal((n, q)) if q else None
    return StateSpaceModel(A, B, C, D, E, None, Ts)


def excite(model, rng, T, x0=None, w=False):
    """White-noise input record and the noise-free response."""
    u = rng.standard_normal((T, model.m))
    wd = rng.standard_normal((T, model.q)) if (w and model.q) else None
    x0 = np.zeros(model.n) if x0 is None else x0
    y = simulate(model, x0, u, wd).data
    return u, y, wd


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(name: str, ok: bool, detail: str = ""):
        line = f"{name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
