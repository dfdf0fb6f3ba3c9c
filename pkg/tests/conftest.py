import numpy as np
import pytest

from beamtwin.bus import LogHeader, SessionLog, Stream
from beamtwin.scene import Blocker, Scene, Wall, build_codebook
from beamtwin.sensors import ClockModel, SensorConfig, Trajectory, run_session

ROOM = Scene(
    (0, 0, 12, 8),
    walls=(Wall((0.3, 0.3), (0.3, 7.7), 6.0),),
    blockers=(Blocker(((6, 3), (7, 3), (7, 4.5), (6, 4.5))), Blocker(((3.5, 3), (4.5, 3), (4.5, 4), (3.5, 4)), 8.0)),
    bs_position=(11.5, 7.5),
)
LOOP = Trajectory([(2, 1), (10, 1), (10, 6), (2, 6)], 0.9, loop=True)
JITTERY = {
    Stream.CAMERA: ClockModel(-400_000, 50_000, 1),
    Stream.LIDAR: ClockModel(250_000, 50_000, 2),
    Stream.IMU: ClockModel(100_000, 0, 3),
    Stream.MMWAVE: ClockModel(-200_000, 50_000, 4),
}


def make_log(duration, clocks=None, width=32, height=18, seed=0, traj=LOOP, scene=ROOM):
    cfg = SensorConfig(camera_width=width, camera_height=height, clocks=dict(clocks or {}))
    return SessionLog(LogHeader(), list(run_session(scene, traj, build_codebook(), cfg, duration, seed))), cfg


@pytest.fixture(scope="session")
def log10():
    """10 s default-rate session with skewed, jittery clocks."""
    return make_log(10.0, JITTERY)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    lines = [v for reps in terminalreporter.stats.values() for r in reps
             for k, v in getattr(r, "user_properties", ()) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(set(lines)):
            terminalreporter.write_line(line)
