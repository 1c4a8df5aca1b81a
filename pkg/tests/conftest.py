from __future__ import annotations

import numpy as np
import pytest

from speedshift.expert import ExpertParams, collect_run
from speedshift.sensing import SensorConfig
from speedshift.track import Track, generate_default_track
from speedshift.vehicle import VehicleParams


@pytest.fixture(scope="session")
def track() -> Track:
    return generate_default_track(0)


@pytest.fixture(scope="session")
def vehicle() -> VehicleParams:
    return VehicleParams()


@pytest.fixture(scope="session")
def sensor() -> SensorConfig:
    return SensorConfig()


@pytest.fixture(scope="session")
def expert_params() -> ExpertParams:
    return ExpertParams(base_lookahead=0.05)


@pytest.fixture(scope="session")
def short_recording(track, vehicle, sensor, expert_params):
    """60 s of slow expert driving with perturbations."""
    return collect_run(track, vehicle, sensor, expert_params, speed=0.7, duration=60.0, seed=11,
                       compute_ms=24.0)


def straight_track(length: float = 20.0, half_width: float = 0.375, spacing: float = 0.04) -> Track:
    """Long thin rectangle with rounded-off corners: the bottom edge is a long straight."""
    n = int(length / spacing)
    bottom = np.column_stack([np.linspace(0.0, length, n, endpoint=False), np.zeros(n)])
    r = 3.0
    arc1 = [(length + r * np.sin(a), r - r * np.cos(a)) for a in np.linspace(0, np.pi, 60, endpoint=False)]
    top = np.column_stack([np.linspace(length, 0.0, n, endpoint=False), np.full(n, 2 * r)])
    arc2 = [(-r * np.sin(a), r + r * np.cos(a)) for a in np.linspace(0, np.pi, 60, endpoint=False)]
    pts = np.vstack([bottom, arc1, top, arc2])
    pts = np.vstack([pts, pts[:1]])
    return Track(pts, half_width)


TINY_CONFIG = """
[global]
seed = 3
[train]
max_epochs = 4
patience = 2
single_hidden = 16, 8
multi_hidden = 24, 8
[study]
duration_s = 150
periods = 5
onpolicy_laps = 1
[sweep]
duration_s = 120
shifts = 0 50
delays = 0 100
extra_cells = 50 176
v_min = 0.8
v_max = 1.6
coarse_step = 0.4
resolution = 0.1
probe_laps = 1
confirm_laps = 2
confirm_seeds = 1
[ood]
max_reference = 300
max_query = 100
"""


@pytest.fixture(scope="session")
def tiny_config_text() -> str:
    """Structure-preserving config small enough to run whole studies in seconds."""
    return TINY_CONFIG


@pytest.fixture(scope="session")
def tiny_config():
    from speedshift.config import loads_config

    return loads_config(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_studies(tmp_path_factory, tiny_config):
    """Speed and delay studies under the tiny config, sharing one artifact root."""
    from speedshift.study import delay_study, speed_study

    root = tmp_path_factory.mktemp("studies")
    speed = speed_study(tiny_config, root / "speed")
    delay = delay_study(tiny_config, root / "delay")
    return root, speed, delay


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        _CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
