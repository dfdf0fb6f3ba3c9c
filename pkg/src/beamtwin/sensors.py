"""Vehicle motion and multi-rate sensor emulation.

Every sensor publishes :class:`~beamtwin.bus.TimestampedRecord` items whose
payloads use the little-endian layouts below:

======== ==== ==========================================================
stream   id   payload
======== ==== ==========================================================
camera   0/5  u16 width, u16 height, f32[width*height] depths, row-major
lidar    1    u16 n, f32[n] ranges (ray k at heading + 2*pi*k/n)
imu      2    f64[9]: accel xyz (body), magnetic xyz, roll pitch yaw
mmwave   3    u8 n, u8 best_index, f64[n] snr_db
position 4    f64[2]: x, y (world frame)
======== ==== ==========================================================
"""
from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .bus import Stream, TimestampedRecord
from .scene import BeamCodebook, RadioConfig, Scene, sweep

NS = 1_000_000_000
MAX_CLOCK_OFFSET_NS = 1_000_000

# nominal sensor rates (Hz)
DEFAULT_RATES = {
    Stream.CAMERA: 30.0,
    Stream.LIDAR: 15.0,
    Stream.IMU: 100.0,
    Stream.MMWAVE: 10.0,
    Stream.POSITION: 100.0,
}


class OutOfRange(ValueError):
    pass


class InvalidRate(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    @property
    def position(self):
        return (self.x, self.y)


class Trajectory:
    """Constant-speed piecewise-linear path through waypoints."""

    def __init__(self, waypoints, speed: float, loop: bool = False):
        wp = np.asarray(waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[0] < 2:
            raise ValueError("trajectory needs at least 2 waypoints")
        if speed <= 0:
            raise ValueError("speed must be positive")
        pts = np.vstack([wp, wp[:1]]) if loop else wp
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths == 0):
            raise ValueError("consecutive waypoints must be distinct")
        self.waypoints = wp
        self.speed = float(speed)
        self.loop = bool(loop)
        self._starts = pts[:-1]
        self._dirs = seg / lengths[:, None]
        self._headings = np.arctan2(seg[:, 1], seg[:, 0]) % (2 * math.pi)
        self._cum = np.concatenate([[0.0], np.cumsum(lengths)])
        self.length = float(self._cum[-1])

    @property
    def duration(self) -> float:
        """Traversal time of one pass (one lap for loops)."""
        return self.length / self.speed

    def _arclength(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise OutOfRange("t must be >= 0")
        s = self.speed * t
        if self.loop:
            return np.mod(s, self.length)
        if np.any(s > self.length * (1 + 1e-12)):
            raise OutOfRange(f"t beyond trajectory end ({self.duration:.3f} s)")
        return np.minimum(s, self.length)

    def poses(self, t):
        """Vectorized pose lookup: returns (positions (N,2), headings (N,))."""
        s = np.atleast_1d(self._arclength(t))
        i = np.searchsorted(self._cum, s, side="right") - 1
        i = np.clip(i, 0, len(self._starts) - 1)
        pos = self._starts[i] + (s - self._cum[i])[:, None] * self._dirs[i]
        return pos, self._headings[i]

    def to_dict(self) -> dict:
        return {"waypoints": self.waypoints.tolist(), "speed": self.speed, "loop": self.loop}


def pose_at(traj: Trajectory, t: float) -> Pose:
    pos, head = traj.poses(t)
    return Pose(float(pos[0, 0]), float(pos[0, 1]), float(head[0]))


# -- range sensors ----------------------------------------------------------


@dataclass
class LidarScan:
    timestamp: int
    ranges: np.ndarray


@dataclass
class CameraFrame:
    timestamp: int
    width: int
    height: int
    pixels: np.ndarray  # (height, width) depths


def cast_rays(scene: Scene, origin, angles, max_range: float) -> np.ndarray:
    """Range to the first wall/blocker edge along each world-frame angle, capped at max_range."""
    angles = np.asarray(angles, dtype=float)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    a, b = scene.segments()
    d = geo.ray_segment_distances(origin, dirs, a, b)
    return np.minimum(d, max_range)


def lidar_azimuths(heading: float, n_rays: int = 1600) -> np.ndarray:
    return heading + 2 * math.pi * np.arange(n_rays) / n_rays


def camera_azimuths(heading: float, width: int, fov: float) -> np.ndarray:
    """Column angles, left (+fov/2) to right (-fov/2), edges included."""
    if width == 1:
        return np.array([heading])
    return heading + fov / 2 - fov * np.arange(width) / (width - 1)


def render_lidar(scene: Scene, pose: Pose, n_rays: int = 1600, max_range: float = 12.0, timestamp: int = 0) -> LidarScan:
    ranges = cast_rays(scene, pose.position, lidar_azimuths(pose.heading, n_rays), max_range)
    return LidarScan(timestamp, ranges)


def render_camera(scene: Scene, pose: Pose, width: int = 160, height: int = 90,
                  fov: float = math.radians(90), max_range: float = 12.0, timestamp: int = 0) -> CameraFrame:
    # each column is one ray; rows repeat it (billboard depth image)
    if not 0 < fov < math.pi:
        raise ValueError("fov must lie in (0, pi)")
    cols = cast_rays(scene, pose.position, camera_azimuths(pose.heading, width, fov), max_range)
    return CameraFrame(timestamp, width, height, np.tile(cols, (height, 1)))


def lidar_to_points(ranges, heading: float = 0.0) -> np.ndarray:
    """Convert a range ring to body-frame (x, y, z) points, z = 0."""
    r = np.asarray(ranges, dtype=float)
    az = lidar_azimuths(0.0, len(r)) + heading
    return np.stack([r * np.cos(az), r * np.sin(az), np.zeros_like(r)], axis=1)


# -- inertial -----------------------------------------------------------------


@dataclass
class ImuSample:
    timestamp: int
    acceleration: np.ndarray
    magnetic: np.ndarray
    orientation: np.ndarray


def world_acceleration(traj: Trajectory, t, h: float = 0.01) -> np.ndarray:
    """Backward second difference of position; the vehicle is at rest before t=0.

    The backward form keeps double integration from rest exact up to one
    sample of lag, including the start-up velocity step.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lag = np.stack([t, t - h, t - 2 * h])
    pos, _ = traj.poses(np.maximum(lag, 0.0).ravel())
    pos = pos.reshape(3, -1, 2)
    return (pos[0] - 2 * pos[1] + pos[2]) / (h * h)


def sample_imu(traj: Trajectory, t: float, accel_noise_std: float = 0.0, rng=None,
               h: float = 0.01, timestamp: int = 0) -> ImuSample:
    acc_w = world_acceleration(traj, t, h)[0]
    _, head = traj.poses(t)
    yaw = float(head[0]) % (2 * math.pi)
    c, s = math.cos(yaw), math.sin(yaw)
    acc_b = np.array([c * acc_w[0] + s * acc_w[1], -s * acc_w[0] + c * acc_w[1], 0.0])
    if accel_noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        acc_b[:2] += rng.normal(0.0, accel_noise_std, 2)
    return ImuSample(timestamp, acc_b, np.array([c, s, 0.0]), np.array([0.0, 0.0, yaw]))


# -- clocks -------------------------------------------------------------------


@dataclass(frozen=True)
class ClockModel:
    offset: int = 0  # ns
    jitter_std: float = 0.0  # ns
    seed: int = 0

    def __post_init__(self):
        if abs(self.offset) > MAX_CLOCK_OFFSET_NS:
            raise ValueError("clock offset exceeds the 1 ms synchronization bound")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be >= 0")

    @property
    def max_error(self) -> float:
        return abs(self.offset) + 6 * self.jitter_std

    def stamp(self, true_ns: np.ndarray) -> np.ndarray:
        """Apply offset and bounded (+-6 sigma) Gaussian jitter, keeping the stream monotone."""
        true_ns = np.asarray(true_ns, dtype=np.int64)
        rng = np.random.default_rng(self.seed)
        jitter = np.clip(rng.normal(0.0, self.jitter_std, len(true_ns)), -6 * self.jitter_std, 6 * self.jitter_std)
        t = true_ns + self.offset + np.rint(jitter).astype(np.int64)
        t = np.maximum.accumulate(np.maximum(t, 0))
        return t.astype(np.uint64)


# -- payload codecs -----------------------------------------------------------


def encode_camera(frame: CameraFrame) -> bytes:
    return struct.pack("<HH", frame.width, frame.height) + np.asarray(frame.pixels, dtype="<f4").tobytes()


def decode_camera(payload: bytes) -> np.ndarray:
    w, h = struct.unpack_from("<HH", payload)
    return np.frombuffer(payload, dtype="<f4", offset=4, count=w * h).reshape(h, w).astype(float)


def encode_lidar(scan: LidarScan) -> bytes:
    return struct.pack("<H", len(scan.ranges)) + np.asarray(scan.ranges, dtype="<f4").tobytes()


def decode_lidar(payload: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<H", payload)
    return np.frombuffer(payload, dtype="<f4", offset=2, count=n).astype(float)


def encode_imu(s: ImuSample) -> bytes:
    return np.concatenate([s.acceleration, s.magnetic, s.orientation]).astype("<f8").tobytes()


def decode_imu(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f8", count=9).copy()


def encode_sweep(snr, best_index: int) -> bytes:
    snr = np.asarray(snr, dtype="<f8")
    return struct.pack("<BB", len(snr), best_index) + snr.tobytes()


def decode_sweep(payload: bytes):
    n, best = struct.unpack_from("<BB", payload)
    return np.frombuffer(payload, dtype="<f8", offset=2, count=n).copy(), best


def encode_position(xy) -> bytes:
    return np.asarray(xy, dtype="<f8").tobytes()


def decode_position(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f8", count=2).copy()


# -- session ------------------------------------------------------------------


@dataclass
class SensorConfig:
    camera_width: int = 160
    camera_height: int = 90
    camera_fov: float = math.radians(90)
    rear_camera: bool = False
    lidar_rays: int = 1600
    max_range: float = 12.0
    accel_noise_std: float = 0.0
    imu_diff_step: float = 0.01
    rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))
    clocks: dict = field(default_factory=dict)  # Stream -> ClockModel


def event_times(rate: float, duration: float) -> np.ndarray:
    """True event times (ns) at the nominal period over [0, duration)."""
    if rate <= 0:
        raise InvalidRate(f"rate must be positive, got {rate}")
    n = int(math.ceil(duration * rate - 1e-9))
    return np.array([int(round(k * NS / rate)) for k in range(n)], dtype=np.int64)


def run_session(scene: Scene, traj: Trajectory, codebook: BeamCodebook, config: SensorConfig,
                duration: float, seed: int = 0, radio: RadioConfig = RadioConfig()):
    """Yield records from every sensor, merged by (timestamp, stream id).

    Payloads are rendered lazily so long sessions stream in bounded memory.
    Per-stream order is always timestamp order.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    streams = [s for s in DEFAULT_RATES if s in config.rates]
    if config.rear_camera:
        streams.append(Stream.CAMERA_REAR)
    rates = dict(config.rates)
    rates.setdefault(Stream.CAMERA_REAR, rates.get(Stream.CAMERA, DEFAULT_RATES[Stream.CAMERA]))
    for s in streams:
        if rates[s] <= 0:
            raise InvalidRate(f"rate for {Stream(s).name} must be positive")
    noise_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])

    def render(stream, true_ns, stamp):
        t = true_ns / NS
        if stream == Stream.IMU:
            s = sample_imu(traj, t, config.accel_noise_std, noise_rng, config.imu_diff_step, stamp)
            return encode_imu(s)
        pose = pose_at(traj, t)
        if stream == Stream.POSITION:
            return encode_position(pose.position)
        if stream == Stream.LIDAR:
            return encode_lidar(render_lidar(scene, pose, config.lidar_rays, config.max_range, stamp))
        if stream in (Stream.CAMERA, Stream.CAMERA_REAR):
            if stream == Stream.CAMERA_REAR:
                pose = Pose(pose.x, pose.y, (pose.heading + math.pi) % (2 * math.pi))
            frame = render_camera(scene, pose, config.camera_width, config.camera_height,
                                  config.camera_fov, config.max_range, stamp)
            return encode_camera(frame)
        if stream == Stream.MMWAVE:
            sw = sweep(scene, pose.position, pose.heading, codebook, radio, stamp)
            return encode_sweep(sw.snr, sw.best_index)
        raise ValueError(f"unknown stream {stream}")

    def feed(stream):
        true_ns = event_times(rates[stream], duration)
        clock = config.clocks.get(stream, ClockModel())
        stamps = clock.stamp(true_ns)
        for tn, ts in zip(true_ns.tolist(), stamps.tolist()):
            yield ts, int(stream), tn

    merged = heapq.merge(*(feed(s) for s in streams))
    for ts, sid, tn in merged:
        yield TimestampedRecord(sid, ts, render(sid, tn, ts))
