import numpy as np
import pytest

from softbeam.model import ModelSizes, init_params


def tiny_model(seed=0, n_labels=4, n_inputs=8, hidden=5, scale=0.5, **kw):
    sizes = ModelSizes(n_inputs=n_inputs, n_labels=n_labels, hidden=hidden, label_dim=3, input_dim=3,
                       enc_hidden=kw.pop("enc_hidden", 3))
    return init_params(seed, scale, sizes, **kw)


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
