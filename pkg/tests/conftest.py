import numpy as np
import pytest

from edgemoe.arch import BaseArch, MoeSpec
from edgemoe.model import init_model

TINY = BaseArch(d_model=64, d_ff=128, n_h=4, n_kv=2, d_h=16, n_l=2, vocab_size=64)


def tiny_model(E=4, g=2, k=1, shared=True, shared_units=1, seed=0, std=0.2, n_l=2,
               dispatch="dropless", vocab=64):
    base = BaseArch(d_model=64, d_ff=128, n_h=4, n_kv=2, d_h=16, n_l=n_l, vocab_size=vocab)
    moe = MoeSpec(E=E, g=g, k=k, shared=shared, shared_units=shared_units if shared else None,
                  dispatch_mode=dispatch)
    return init_model(base, moe, seed=seed, std=std)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model():
    return tiny_model()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
