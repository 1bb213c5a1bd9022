from pathlib import Path

import numpy as np
import pytest

from grpo_lab.policy import PolicyParams, Vocabulary, init_params

DATA = Path(__file__).parent / "data"


def random_params(seed: int, *, window: int = 4, embed_dim: int = 4, hidden_dim: int = 8, scale: float = 0.7) -> PolicyParams:
    """Small policy (< 2,000 weights) with every weight, biases included, drawn at random."""
    base = init_params(Vocabulary.default(), context_window=window, embed_dim=embed_dim, hidden_dim=hidden_dim)
    rng = np.random.default_rng(seed)
    return base.replace_weights(rng.normal(0.0, scale, size=base.param_count))


@pytest.fixture
def vocab():
    return Vocabulary.default()


@pytest.fixture
def small_params():
    return random_params(0)


@pytest.fixture
def data_dir():
    return DATA


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
