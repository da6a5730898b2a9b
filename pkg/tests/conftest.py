import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def write_lines():
    """Write text lines to a path and return the path"""
    def _write(path: Path, *lines: str) -> Path:
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return path
    return _write
