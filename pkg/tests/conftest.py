import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

np.seterr(all="warn", under="ignore")

hypothesis.settings.register_profile("default", deadline=None, max_examples=200)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=20)
hypothesis.settings.load_profile("default")

from smrkit.records import (  # noqa: E402
    ORIGINAL,
    ClassificationPrediction,
    DatasetManifest,
    PerceptionRecord,
    QpLadder,
    RecordCollection,
)


def cls_record(machine, image, qp, ranking):
    return PerceptionRecord(machine, image, qp, ClassificationPrediction(tuple(ranking)))


@pytest.fixture
def tiny_manifest():
    return DatasetManifest("classification", QpLadder((32, 51)), ("m1", "m2"), ("img1",))


@pytest.fixture
def tiny_records():
    """Both machines consistent at qp 32; m2 flips top-1 at qp 51."""
    recs = [
        cls_record("m1", "img1", ORIGINAL, [1, 2, 3, 4, 5]),
        cls_record("m1", "img1", 32, [1, 3, 2, 4, 5]),
        cls_record("m1", "img1", 51, [1, 2, 3, 4, 5]),
        cls_record("m2", "img1", ORIGINAL, [7, 8, 9, 10, 11]),
        cls_record("m2", "img1", 32, [7, 8, 9, 10, 11]),
        cls_record("m2", "img1", 51, [8, 7, 9, 10, 11]),
    ]
    return RecordCollection("classification", recs)


# --- acceptance reporting ----------------------------------------------------

ACCEPTANCE_RESULTS: list[str] = []


@pytest.fixture
def report_criterion(capsys):
    """Record one PASS/FAIL line; lines are echoed live and repeated in the summary."""

    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_RESULTS.append(line)
        with capsys.disabled():
            print(f"\n[acceptance] {line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
