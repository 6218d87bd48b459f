import os
from pathlib import Path

import pytest

from fedboost.dataset import parse_libsvm

REPO_ROOT = Path(__file__).resolve().parents[1]


def data_file(name: str) -> Path:
    root = Path(os.environ.get("FEDBOOST_DATA", REPO_ROOT / "data"))
    return root / name


def require_dataset(name: str) -> Path:
    """Fail (not skip) when a gated dataset is absent: the criterion it backs
    cannot be demonstrated without the file, and silence would hide that."""
    path = data_file(name)
    if not path.is_file():
        pytest.fail(
            f"dataset file missing: {path} — place the libsvm training file "
            f"there (or set FEDBOOST_DATA) to run this check",
            pytrace=False,
        )
    return path


@pytest.fixture(scope="session")
def a9a_dataset():
    return parse_libsvm(require_dataset("a9a"))
