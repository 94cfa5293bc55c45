import os
import sys

import numpy as np
import pytest

from finedet.cli import fixture_text
from finedet.harness.synth import GeneratorConfig, generate_dataset
from finedet.taxonomy import parse_partition, parse_taxonomy

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")
REGEN = os.environ.get("FINEDET_REGEN_GOLDEN") == "1"

_ACCEPTANCE_LINES = []


def check_golden(name: str, text: str):
    """Compare ``text`` with a stored golden file (rewritten when regenerating)."""
    path = os.path.join(GOLDEN_DIR, name)
    if REGEN or not os.path.exists(path):
        os.makedirs(GOLDEN_DIR, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        if not REGEN:
            pytest.fail(f"golden file {name} was missing and has been written; rerun")
    with open(path, encoding="utf-8") as fh:
        assert fh.read() == text, f"output differs from golden file {name}"


@pytest.fixture
def acceptance_report():
    def report(number, name, ok, detail, elapsed, limit):
        timely = elapsed < limit
        status = "PASS" if ok and timely else "FAIL"
        line = f"[{status}] criterion {number}: {name} | {detail} | {elapsed:.1f}s (limit {limit:.0f}s)"
        _ACCEPTANCE_LINES.append(line)
        print(line, file=sys.stderr)
        assert ok, line
        assert timely, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy():
    graph = parse_taxonomy(fixture_text("toy.taxonomy"))
    return graph, parse_partition(fixture_text("toy.partition"), graph)


def small_config(**kw) -> GeneratorConfig:
    base = dict(n_coarse=3, fine_per_coarse=2, dim=12, n_detection=24, n_classification=24, n_test=12,
                proposals_per_scene=16, good_per_object=3, parts_per_object=1, embedding_samples=5)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(small_config(), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
