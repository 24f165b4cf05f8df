import numpy as np
import pytest

from m2tr.config import Config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A 32px model small enough for finite-difference checks."""
    return Config(image_size=32, stem_channels=4, feature_dim=8, n_stack=1, patch_sides=(8, 4, 2),
                  batch_size=4, epochs=1, seed=3)


# ---- acceptance reporting ---------------------------------------------------

_VERDICTS: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one pass/fail line for an acceptance criterion and echo it uncaptured."""

    def record(name: str, passed: bool, detail: str, soft: bool = False) -> bool:
        tag = "PASS" if passed else ("FLAG" if soft else "FAIL")
        line = f"[{tag}] {name}: {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
