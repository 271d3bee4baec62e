import numpy as np
import pytest

from llpcs.data import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def toy_dataset(n=40, d=3, seed=0, domain="target", n_cat=0, card=3):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, d))
    y = x @ np.arange(1, d + 1) / d + 0.1 * r.normal(size=n)
    cat = r.integers(0, card, size=(n, n_cat))
    return Dataset(
        features=x, labels=y, categorical=cat, domain=domain,
        categorical_names=tuple(f"c{i}" for i in range(n_cat)),
        cardinalities=(card,) * n_cat,
    )


@pytest.fixture
def toy():
    return toy_dataset


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
