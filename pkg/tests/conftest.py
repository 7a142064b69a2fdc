import numpy as np
import pytest

from roundrefine.datagen import DatasetManifest, generate_dataset
from roundrefine.model import ModelConfig, Policy

TINY = ModelConfig(hidden=8, attn_heads=2, decoder_layers=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(DatasetManifest(seed=11, counts={"sparse": 48, "dense": 24, "test": 20}))


@pytest.fixture
def tiny_policy():
    return Policy(TINY, seed=3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion for the summary."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
