import numpy as np
import pytest
import torch

from meshletemp.body_model import build_default_body
from meshletemp.config import preset
from meshletemp.topology import build_topology

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_body():
    return build_default_body("desk")


@pytest.fixture(scope="session")
def desk_topo(desk_body):
    return build_topology(desk_body, 64)


@pytest.fixture(scope="session")
def full_body():
    return build_default_body("paper-shape")


@pytest.fixture(scope="session")
def full_topo(full_body):
    return build_topology(full_body, 431)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small desk variant used where only the contract, not capacity, matters."""
    return preset(
        "desk",
        **{
            "model.channels": 16,
            "model.backbone_widths": [4, 8, 8],
            "model.image_size": 32,
            "model.regressor_hidden": [16],
            "model.camera_hidden": 8,
            "model.coarse_count": 24,
            "mte.block_widths": [16, 12, 8],
            "mte.heads_per_block": 2,
            "mte.layers_per_block": 1,
        },
    )


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{status} {name}" + (f": {detail}" if detail else ""))
