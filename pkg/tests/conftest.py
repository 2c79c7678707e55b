import numpy as np
import pytest

from stsun.model import ModelConfig

SMALL_CATEGORIES = ("change", "background", "building", "road", "water", "barren", "forest", "agriculture")


def small_config(**kw) -> ModelConfig:
    """A model small enough for exhaustive property tests."""
    base = dict(H=4, W=4, T=2, C_e=4, C_a=2, heads=2, hyper_heads=2, hyper_depth=1,
                encoder_depth=1, decoder_depth=1, horizontal_window=(1, 4), vertical_window=(4, 1),
                square_window=(2, 2), categories=SMALL_CATEGORIES)
    base.update(kw)
    return ModelConfig(**base)


def desk_config(**kw) -> ModelConfig:
    """The configuration used for the 32x32 synthetic training protocols."""
    base = dict(H=16, W=16, T=2, C_e=4, C_a=4, heads=2, hyper_heads=2, hyper_depth=1,
                encoder_depth=1, decoder_depth=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each; printed together at the end of the run
ACCEPTANCE = []


def record(criterion: str, ok: bool, detail: str = ""):
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
