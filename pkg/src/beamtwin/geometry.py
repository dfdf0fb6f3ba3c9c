"""Planar geometry helpers shared by the propagation model and the sensor renderers."""
import math

import numpy as np

EPS = 1e-12


def wrap_angle(a):
    """Wrap angle(s) to [-pi, pi)."""
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


def cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def ray_segment_distances(origin, directions, seg_a, seg_b):
    """Distance along each ray to the nearest segment hit.

    Parameters
    ----------
    origin : (2,) array
    directions : (N, 2) unit vectors
    seg_a, seg_b : (M, 2) segment endpoints

    Returns
    -------
    (N,) array of hit distances, ``inf`` where a ray hits nothing.
    """
    directions = np.asarray(directions, dtype=float)
    n = directions.shape[0]
    if len(seg_a) == 0:
        return np.full(n, np.inf)
    origin = np.asarray(origin, dtype=float)
    a = np.asarray(seg_a, dtype=float)
    e = np.asarray(seg_b, dtype=float) - a
    ao = a - origin  # (M, 2)
    d = directions[:, None, :]  # (N, 1, 2)
    denom = d[..., 0] * e[None, :, 1] - d[..., 1] * e[None, :, 0]  # (N, M)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = (ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]) / denom
        s = (ao[None, :, 0] * d[..., 1] - ao[None, :, 1] * d[..., 0]) / denom
    hit = (np.abs(denom) > EPS) & (t > EPS) & (s >= 0.0) & (s <= 1.0)
    t = np.where(hit, t, np.inf)
    return t.min(axis=1)


def segments_cross(p, q, a, b, tol=1e-9):
    """True if open segment p-q crosses segment a-b away from p and q."""
    p, q, a, b = (np.asarray(v, dtype=float) for v in (p, q, a, b))
    r = q - p
    e = b - a
    denom = r[0] * e[1] - r[1] * e[0]
    if abs(denom) < EPS:
        return False
    ap = a - p
    t = (ap[0] * e[1] - ap[1] * e[0]) / denom
    s = (ap[0] * r[1] - ap[1] * r[0]) / denom
    return tol < t < 1.0 - tol and -tol <= s <= 1.0 + tol


def segment_polygon_overlap(p, q, vertices):
    """Length fraction of segment p-q lying inside a convex CCW polygon (Cyrus-Beck)."""
    p = np.asarray(p, dtype=float)
    r = np.asarray(q, dtype=float) - p
    v = np.asarray(vertices, dtype=float)
    t_in, t_out = 0.0, 1.0
    for i in range(len(v)):
        a, b = v[i], v[(i + 1) % len(v)]
        edge = b - a
        # inward normal for CCW ordering
        normal = np.array([-edge[1], edge[0]])
        num = float(np.dot(normal, p - a))
        den = float(np.dot(normal, r))
        if abs(den) < EPS:
            if num < 0:
                return 0.0
            continue
        t = -num / den
        if den > 0:
            t_in = max(t_in, t)
        else:
            t_out = min(t_out, t)
        if t_in >= t_out:
            return 0.0
    return t_out - t_in


def point_in_convex(point, vertices, strict=True):
    v = np.asarray(vertices, dtype=float)
    p = np.asarray(point, dtype=float)
    edges = np.roll(v, -1, axis=0) - v
    c = cross2(edges, p - v)
    return bool(np.all(c > 0)) if strict else bool(np.all(c >= 0))


def ccw(vertices):
    """Return polygon vertices in counter-clockwise order."""
    v = np.asarray(vertices, dtype=float)
    area2 = float(np.sum(cross2(v, np.roll(v, -1, axis=0))))
    return v[::-1].copy() if area2 < 0 else v.copy()


def mirror_point(point, a, b):
    """Reflect ``point`` across the infinite line through a and b."""
    p, a, b = (np.asarray(x, dtype=float) for x in (point, a, b))
    e = b - a
    t = np.dot(p - a, e) / np.dot(e, e)
    foot = a + t * e
    return 2 * foot - p
