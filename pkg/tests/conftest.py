import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from feedopt.bioplant import load_dataset  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def dataset():
    return load_dataset()
