import logging

import numpy as np
import pytest

from moe_workbench.model import ModelConfig, init_planted

logging.getLogger("moe_workbench").setLevel(logging.ERROR)

SMALL = ModelConfig(num_layers=2, hidden_dim=32, ffn_dim=48, num_heads=2, num_experts=4, top_k=2, vocab_size=64, max_seq_len=64)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_model():
    return init_planted(SMALL, seed=0)


@pytest.fixture(scope="session")
def default_model():
    return init_planted(ModelConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tokens(cfg, n, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=n)


# acceptance lines are collected here and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
