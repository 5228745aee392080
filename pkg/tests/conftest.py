import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", derandomize=True, deadline=None)
settings.register_profile("stress", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from dograph.model import ModelConfig, Sample, init_state
from dograph.numerics import make_rng


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=5, seq_len=4, embed_dim=3, qk_dim=3, v_dim=3, hidden_dim=3,
                       attn_temperature=0.5)


@pytest.fixture
def tiny_state(tiny_cfg):
    return init_state(tiny_cfg, make_rng(0), 1.0)


def random_sample(cfg, rng, domain=0):
    return Sample(rng.integers(0, cfg.vocab_size, cfg.seq_len),
                  rng.integers(0, cfg.vocab_size, cfg.seq_len), domain)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
