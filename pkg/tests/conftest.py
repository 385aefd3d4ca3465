import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from toydata import make_clip, write_corpus  # noqa: E402


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def corpus(tmp_path):
    root = tmp_path / "corpus"
    write_corpus(root, episodes=2, frames=8, size=32, seed=0)
    return root


@pytest.fixture
def clip():
    return make_clip(n_frames=8, size=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        title, status, notes = module.RESULTS[number]
        line = f"criterion {number} ({title}): {status}"
        terminalreporter.write_line(f"{line}  [{notes}]" if notes else line)
