import copy
import json

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ddmor.mesh import assemble_operators, build_mesh
from ddmor.semiconductor import PhysicalDevice, scale_device
from ddmor.study import DATA_DIR

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def diode():
    return PhysicalDevice()


@pytest.fixture
def sdev(diode):
    return scale_device(diode)


@pytest.fixture
def fem8():
    return assemble_operators(build_mesh(8))


@pytest.fixture(scope="session")
def fig1_doc():
    with open(DATA_DIR / "fig1_basic.json") as fh:
        return json.load(fh)


@pytest.fixture
def fig1_dict(fig1_doc):
    return copy.deepcopy(fig1_doc)


def rc_netlist(R=1e3, C=1e-9, amplitude=5.0, frequency=1e5, waveform="sin"):
    """Voltage source -> R -> C to ground, no semiconductors."""
    return {
        "nodes": ["in", "out"],
        "branches": [
            {"name": "V1", "type": "V", "nodes": ["in", "0"], "waveform": waveform,
             "amplitude": amplitude, "frequency": frequency, "offset": 0.0},
            {"name": "R1", "type": "R", "nodes": ["in", "out"], "value": R},
            {"name": "C1", "type": "C", "nodes": ["out", "0"], "value": C},
        ],
    }


def random_unit(rng, n):
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


_CRITERIA = {}


def record_criterion(number, ok, detail):
    """Keep one PASS/FAIL line per acceptance criterion for the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
