import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from p4dkit.nnkit import float_mode  # noqa: E402


@pytest.fixture
def f64():
    with float_mode("64"):
        yield torch.float64
