import numpy as np
import pytest

from linattn import Fill, Shape, make_tensor

from mutants import install_a_term_omission, install_beta_sign_flip, install_prefix_off_by_one


def seeded_inputs(seed, n, d, groups=1, layout=None):
    """q, k, v and a cotangent drawn from consecutive seeds starting at ``seed``."""
    shape = Shape(1, groups, n, d)
    kw = {} if layout is None else {"layout": layout}
    return [make_tensor(shape, fill=Fill.UNIFORM, seed=seed + i, **kw) for i in range(4)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def beta_sign_flip(monkeypatch):
    install_beta_sign_flip(monkeypatch)


@pytest.fixture
def prefix_off_by_one(monkeypatch):
    install_prefix_off_by_one(monkeypatch)


@pytest.fixture
def a_term_omission(monkeypatch):
    install_a_term_omission(monkeypatch)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
