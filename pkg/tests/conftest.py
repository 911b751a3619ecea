import numpy as np
import pytest

from smope.model import Backbone, LearnerState, ModelConfig
from smope.numerics import make_rng

# acceptance criterion number -> (title, PASS/FAIL, detail), filled by test_acceptance
ACCEPTANCE = {}


def random_head(rng, d, dk):
    return tuple(rng.normal(0.0, 1.0 / np.sqrt(d), (d, dk)) for _ in range(3))


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(depth=2, heads=2, embed_dim=8, tokens=4, raw_dim=3, prompt_layers=2, prompt_length=4,
                       select_k=2)


@pytest.fixture
def tiny_state(tiny_cfg):
    rng = make_rng(0)
    bb = Backbone.init(tiny_cfg, rng)
    state = LearnerState.init(tiny_cfg, bb, rng)
    state.head.grow(3, rng, 0.3)
    return state


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {title:<24} {status}  {detail}")
