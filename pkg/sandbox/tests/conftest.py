import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from minihost import MiniHost  # noqa: E402


@pytest.fixture
def host():
    h = MiniHost()
    yield h
    h.close()
