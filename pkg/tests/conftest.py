import numpy as np
import pytest
import torch

from tsddnet.backbone import BackboneConfig
from tsddnet.cnet import CNetConfig
from tsddnet.dnet import DNetConfig
from tsddnet.phantom import PhantomSpec, generate

torch.set_num_threads(1)

TINY_BACKBONE = BackboneConfig((1, 1, 1, 1), (4, 8, 8, 8), 4)


@pytest.fixture(scope="session")
def tiny_dnet_cfg():
    return DNetConfig(TINY_BACKBONE, 8, 1, 128)


@pytest.fixture(scope="session")
def tiny_cnet_cfg():
    return CNetConfig(TINY_BACKBONE, roi_size=32)


@pytest.fixture(scope="session")
def tiny_phantom(tmp_path_factory):
    """10 patients x 2 images of 128 px; written once per session."""
    out = tmp_path_factory.mktemp("phantom")
    generate(PhantomSpec(10, 2, 128, 0.25, seed=5), out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""
    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
