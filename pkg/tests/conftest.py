import json
import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
sys.path.insert(0, str(TESTS))

FIXTURES = TESTS / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def worked_samples():
    from pathsynth.dataset_io import load_samples

    return {s.sample_id: s for s in load_samples(FIXTURES / "worked_samples.jsonl")}


@pytest.fixture
def golden_trajectories():
    from pathsynth.trajectory import read_trajectories

    return {t.sample_id: t for t in read_trajectories(FIXTURES / "golden" / "trajectories.jsonl")}


def write_jsonl(path: Path, rows) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path
