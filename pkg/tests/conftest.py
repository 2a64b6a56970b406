import numpy as np
import pytest
from hypothesis import settings

from dualrec.models import AutoregressiveModel, TabularModel
from dualrec.space import Categorical, enumerate_space

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_categorical(space, rng, concentration=1.0):
    return Categorical(space, rng.dirichlet(np.full(len(space), concentration)))


def fd_grad(f, params, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params`` (in place)."""
    g = np.zeros_like(params)
    flat, gf = params.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def space12():
    # 3 + 9 = 12 sentences
    return enumerate_space(("a", "b", "c"), 2)


@pytest.fixture
def space8():
    return enumerate_space(tuple("abcdefgh"), 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_model(kind, src, dst, seed, scale=1.0):
    cls = TabularModel if kind == "tabular" else AutoregressiveModel
    return cls(src, dst, init_scale=scale, random_state=seed)


# acceptance criteria append (label, passed, detail) here; printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
