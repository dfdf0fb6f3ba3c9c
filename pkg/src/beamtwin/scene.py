"""Scene geometry, the beam codebook, and a first-order ray-traced channel.

The channel is free-space path loss plus fixed per-interaction losses: one
specular bounce per wall, penetration loss through lossy blockers, and
opaque blockers/walls that drop a path outright. The UE sweeps a two-level
(flat mainlobe / flat sidelobe) codebook; the BS receives omnidirectionally.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_CARRIER_HZ = 60e9
DEFAULT_SNR_FLOOR_DB = -40.0
DEFAULT_REFLECTION_LOSS_DB = 10.0
DEFAULT_PENETRATION_LOSS_DB = 25.0


class InvalidArgument(ValueError):
    pass


class InvalidPose(ValueError):
    pass


@dataclass(frozen=True)
class Wall:
    start: tuple
    end: tuple
    reflection_loss_db: float = DEFAULT_REFLECTION_LOSS_DB


@dataclass(frozen=True)
class Blocker:
    vertices: tuple  # CCW
    penetration_loss_db: float = math.inf

    def __post_init__(self):
        verts = tuple(tuple(map(float, v)) for v in geo.ccw(self.vertices))
        object.__setattr__(self, "vertices", verts)

    @property
    def opaque(self) -> bool:
        return math.isinf(self.penetration_loss_db)

    def edges(self):
        v = np.asarray(self.vertices, dtype=float)
        return v, np.roll(v, -1, axis=0)


@dataclass(frozen=True)
class Scene:
    bounds: tuple  # (xmin, ymin, xmax, ymax)
    walls: tuple = ()
    blockers: tuple = ()
    bs_position: tuple = (0.0, 0.0)
    bs_facing: float = 0.0

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise InvalidArgument("scene bounds must have positive width and height")
        for w in self.walls:
            if w.reflection_loss_db < 0:
                raise InvalidArgument("reflection loss must be >= 0")
            for p in (w.start, w.end):
                if not self.contains(p):
                    raise InvalidArgument(f"wall endpoint {p} outside bounds")
        for b in self.blockers:
            if b.penetration_loss_db < 0:
                raise InvalidArgument("penetration loss must be >= 0")
            for p in b.vertices:
                if not self.contains(p):
                    raise InvalidArgument(f"blocker vertex {p} outside bounds")
        if not self.contains(self.bs_position):
            raise InvalidArgument("BS outside scene bounds")
        if self.inside_blocker(self.bs_position):
            raise InvalidArgument("BS inside a blocker")

    def contains(self, p) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax

    def inside_blocker(self, p) -> bool:
        return any(geo.point_in_convex(p, b.vertices) for b in self.blockers)

    def segments(self):
        """All wall and blocker-edge segments as (A, B) arrays, walls first."""
        a, b = [], []
        for w in self.walls:
            a.append(w.start)
            b.append(w.end)
        for blk in self.blockers:
            va, vb = blk.edges()
            a.extend(va)
            b.extend(vb)
        return np.asarray(a, dtype=float).reshape(-1, 2), np.asarray(b, dtype=float).reshape(-1, 2)

    def to_dict(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "walls": [
                {"start": list(w.start), "end": list(w.end), "reflection_loss_db": w.reflection_loss_db}
                for w in self.walls
            ],
            "blockers": [
                {
                    "vertices": [list(v) for v in b.vertices],
                    "penetration_loss_db": None if b.opaque else b.penetration_loss_db,
                }
                for b in self.blockers
            ],
            "bs": {"position": list(self.bs_position), "facing": self.bs_facing},
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def scene_from_dict(d: dict) -> Scene:
    """Build a Scene from the JSON scene schema (see README)."""
    walls = tuple(
        Wall(
            tuple(map(float, w["start"])),
            tuple(map(float, w["end"])),
            float(w.get("reflection_loss_db", DEFAULT_REFLECTION_LOSS_DB)),
        )
        for w in d.get("walls", [])
    )
    blockers = []
    for b in d.get("blockers", []):
        loss = b.get("penetration_loss_db")
        loss = math.inf if loss is None else float(loss)
        blockers.append(Blocker(tuple(map(tuple, b["vertices"])), loss))
    bs = d.get("bs", {})
    return Scene(
        bounds=tuple(map(float, d["bounds"])),
        walls=walls,
        blockers=tuple(blockers),
        bs_position=tuple(map(float, bs.get("position", (0.0, 0.0)))),
        bs_facing=float(bs.get("facing", 0.0)),
    )


def load_scene(path) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as f:
        json.dump(scene.to_dict(), f, indent=2, sort_keys=True)


# -- codebook ---------------------------------------------------------------


@dataclass(frozen=True)
class BeamCodebook:
    centers: np.ndarray
    mainlobe_width: float
    gain_db: float
    sidelobe_db: float

    def __len__(self):
        return len(self.centers)

    @property
    def spacing(self) -> float:
        return 2 * math.pi / len(self.centers)

    def gains(self, offsets_from_center) -> np.ndarray:
        """Two-level pattern gain for angular offsets (radians) from each beam center."""
        inside = np.abs(geo.wrap_angle(offsets_from_center)) <= self.mainlobe_width / 2
        return np.where(inside, self.gain_db, self.sidelobe_db)

    def nearest_beam(self, body_bearing: float) -> int:
        """Index of the beam whose center is angularly closest (lowest index on ties)."""
        d = np.abs(geo.wrap_angle(body_bearing - self.centers))
        return int(np.argmin(d))


def build_codebook(n_beams=36, mainlobe_width=math.radians(10), gain=15.0, sidelobe=-10.0) -> BeamCodebook:
    if n_beams < 2:
        raise InvalidArgument("n_beams must be >= 2")
    if mainlobe_width <= 0:
        raise InvalidArgument("mainlobe width must be positive")
    if gain <= sidelobe:
        raise InvalidArgument("mainlobe gain must exceed the sidelobe floor")
    centers = 2 * math.pi * np.arange(n_beams) / n_beams
    return BeamCodebook(centers, float(mainlobe_width), float(gain), float(sidelobe))


# -- ray tracing --------------------------------------------------------------


@dataclass(frozen=True)
class PropagationPath:
    vertices: tuple
    kind: str  # "los" | "reflection" | "penetration"
    total_length: float
    extra_loss: float = 0.0

    @property
    def departure_angle(self) -> float:
        (x0, y0), (x1, y1) = self.vertices[0], self.vertices[1]
        return math.atan2(y1 - y0, x1 - x0)


def _leg_loss(scene: Scene, p, q, skip_wall=None):
    """Summed penetration loss along p->q, or None if an opaque obstacle cuts it."""
    for i, w in enumerate(scene.walls):
        if i == skip_wall:
            continue
        if geo.segments_cross(p, q, w.start, w.end):
            return None
    loss = 0.0
    for b in scene.blockers:
        if geo.segment_polygon_overlap(p, q, b.vertices) > 1e-12:
            if b.opaque:
                return None
            loss += b.penetration_loss_db
    return loss


def _length(vertices):
    v = np.asarray(vertices, dtype=float)
    return float(np.sum(np.hypot(*np.diff(v, axis=0).T)))


def trace_paths(scene: Scene, tx, rx, max_reflections: int = 1) -> list:
    """Enumerate LoS/penetration and first-order specular paths from tx to rx.

    Walls are opaque to transmission. Ordering: the direct path first, then
    one reflection per wall in scene order.
    """
    if max_reflections not in (0, 1):
        raise InvalidArgument("only max_reflections 0 or 1 is supported")
    tx = tuple(map(float, tx))
    rx = tuple(map(float, rx))
    if not (scene.contains(tx) and scene.contains(rx)):
        raise InvalidArgument("tx/rx outside scene bounds")
    # all geometry runs on one canonical endpoint order, so reversed paths round identically
    p, q = (tx, rx) if tx <= rx else (rx, tx)
    paths = []
    loss = _leg_loss(scene, p, q)
    if loss is not None and tx != rx:
        kind = "los" if loss == 0.0 else "penetration"
        paths.append(PropagationPath((tx, rx), kind, _length((tx, rx)), loss))
    if max_reflections == 0:
        return paths
    for i, w in enumerate(scene.walls):
        a = np.asarray(w.start, dtype=float)
        b = np.asarray(w.end, dtype=float)
        e = b - a
        # signed distances to the wall line; an endpoint on the wall has no bounce
        side_p = geo.cross2(e, np.asarray(p) - a) / np.hypot(*e)
        side_q = geo.cross2(e, np.asarray(q) - a) / np.hypot(*e)
        if side_p * side_q <= 0 or min(abs(side_p), abs(side_q)) < geo.EPS:
            continue
        image = geo.mirror_point(q, a, b)
        r = image - np.asarray(p)
        denom = geo.cross2(r, e)
        if abs(denom) < geo.EPS:
            continue
        s = geo.cross2(np.asarray(p) - a, r) / -denom
        if not 0.0 <= s <= 1.0:
            continue
        specular = tuple(map(float, a + s * e))
        l1 = _leg_loss(scene, p, specular, skip_wall=i)
        if l1 is None:
            continue
        l2 = _leg_loss(scene, specular, q, skip_wall=i)
        if l2 is None:
            continue
        verts = (tx, specular, rx)
        paths.append(PropagationPath(verts, "reflection", _length(verts), w.reflection_loss_db + l1 + l2))
    return paths


def path_gain_db(path: PropagationPath, carrier_hz: float = DEFAULT_CARRIER_HZ) -> float:
    d = path.total_length
    if d <= 0:
        raise InvalidArgument("path length must be positive")
    fspl = 20 * math.log10(4 * math.pi * d * carrier_hz / SPEED_OF_LIGHT)
    return -fspl - path.extra_loss


# -- exhaustive sweep ---------------------------------------------------------


@dataclass
class BeamSweep:
    timestamp: int
    snr: np.ndarray
    best_index: int = field(default=-1)

    def __post_init__(self):
        self.snr = np.asarray(self.snr, dtype=float)
        if self.best_index < 0:
            self.best_index = best_beam(self.snr)


def best_beam(snr) -> int:
    """Argmax with ties resolved to the lowest index."""
    return int(np.argmax(np.asarray(snr)))


@dataclass(frozen=True)
class RadioConfig:
    carrier_hz: float = DEFAULT_CARRIER_HZ
    tx_power_dbm: float = 10.0
    noise_floor_dbm: float = -70.0
    snr_floor_db: float = DEFAULT_SNR_FLOOR_DB


def sweep(scene: Scene, ue_position, ue_heading: float, codebook: BeamCodebook,
          radio: RadioConfig = RadioConfig(), timestamp: int = 0, paths=None) -> BeamSweep:
    """Measure every codebook beam from the UE pose and label the best one."""
    if scene.inside_blocker(ue_position):
        raise InvalidPose(f"UE position {tuple(ue_position)} is inside a blocker")
    if not scene.contains(ue_position):
        raise InvalidPose(f"UE position {tuple(ue_position)} outside scene bounds")
    if paths is None:
        paths = trace_paths(scene, ue_position, scene.bs_position, 1)
    n = len(codebook)
    if not paths:
        return BeamSweep(timestamp, np.full(n, radio.snr_floor_db), 0)
    power_mw = np.zeros(n)
    for p in paths:
        offsets = p.departure_angle - ue_heading - codebook.centers
        rx_dbm = radio.tx_power_dbm + codebook.gains(offsets) + path_gain_db(p, radio.carrier_hz)
        power_mw += 10.0 ** (rx_dbm / 10.0)
    snr = 10.0 * np.log10(power_mw) - radio.noise_floor_dbm
    snr = np.maximum(snr, radio.snr_floor_db)
    return BeamSweep(timestamp, snr)

