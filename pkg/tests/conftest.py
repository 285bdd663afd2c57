import sys

import numpy as np
import pytest

from anc_lab.acoustics import AncGeometry
from anc_lab.config import ScenarioConfig
from anc_lab.controller import Scenario, prepare_plant, scenario_noise
from anc_lab.filters import train_library


@pytest.fixture(scope="session")
def desk_geometry():
    return AncGeometry.desk(0.2)


@pytest.fixture(scope="session")
def desk_library(desk_geometry):
    """Every grid direction, pre-trained briefly; enough for ordering checks."""
    return train_library(desk_geometry, duration=6.0, seed=0)


def make_scenario(geometry, mode="constant-rate", duration=6.0, seed=0, **kw):
    sc = ScenarioConfig(name="t", mode=mode, duration=duration, seed=seed, **kw)
    traj = sc.motion().trajectory(geometry.radius)
    n = traj.n_frames * 8000 + geometry.primary_length
    return Scenario(geometry, traj, scenario_noise(n, seed), sc.snr_db, seed, name="t")


@pytest.fixture(scope="session")
def moving_plant(desk_geometry):
    """Ten seconds at 10 deg/s from 0 deg."""
    return prepare_plant(make_scenario(desk_geometry, initial_doa=0.0, angular_velocity=10.0, duration=10.0))


@pytest.fixture(scope="session")
def static_plant(desk_geometry):
    return prepare_plant(make_scenario(desk_geometry, mode="static", initial_doa=40.0, duration=5.0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{n:2d} {'PASS' if ok else 'FAIL'}  {detail}")
