import numpy as np
import pytest
import torch

from srdefect.datasetprep import make_pairs
from srdefect.synthgen import SynthSpec, generate_splits


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16 train / 4 val images at 256 plus their 256->128 pairs."""
    root = tmp_path_factory.mktemp("tiny")
    m = generate_splits(SynthSpec(resolution=256, seed=5), {"train": 16, "val": 4}, root / "synth")
    pm = make_pairs(m, [256, 128], root)
    return m, pm


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def check(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
