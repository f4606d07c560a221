"""Oriented-rectangle geometry for agent bounding boxes.

All routines are vectorized over a leading batch axis so the cost functions
can evaluate thousands of box pairs per optimizer iteration.
"""
from __future__ import annotations

import math

import numpy as np

# Corner order (counter-clockwise, vehicle frame): front-left, rear-left,
# rear-right, front-right.  Matches (2,1),(-2,1),(-2,-1),(2,-1) for a 4x2 box.
_CORNER_SIGNS = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])


def wrap_angle(a):
    """Wrap angle(s) into [-pi, pi]; in-range values are returned unchanged."""
    a = np.asarray(a, float)
    return np.where(np.abs(a) <= math.pi, a, np.arctan2(np.sin(a), np.cos(a)))


def wrap_scalar(a: float) -> float:
    if -math.pi <= a <= math.pi:
        return a
    return math.atan2(math.sin(a), math.cos(a))


def local_corners(length, width):
    """Corner offsets in the vehicle frame, shape (..., 4, 2)."""
    half = np.stack([np.asarray(length, float) / 2.0, np.asarray(width, float) / 2.0], axis=-1)
    return half[..., None, :] * _CORNER_SIGNS


def box_corners(x, y, yaw, length, width):
    """World-frame corners, shape broadcast(x.shape) + (4, 2)."""
    x, y, yaw = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(yaw, float))
    loc = local_corners(length, width)
    c, s = np.cos(yaw)[..., None], np.sin(yaw)[..., None]
    cx = x[..., None] + c * loc[..., 0] - s * loc[..., 1]
    cy = y[..., None] + s * loc[..., 0] + c * loc[..., 1]
    return np.stack([cx, cy], axis=-1)


def corner_yaw_derivative(yaw, length, width):
    """d(corner)/d(yaw), same shape as box_corners output."""
    yaw = np.asarray(yaw, float)
    loc = local_corners(length, width)
    c, s = np.cos(yaw)[..., None], np.sin(yaw)[..., None]
    dx = -s * loc[..., 0] - c * loc[..., 1]
    dy = c * loc[..., 0] - s * loc[..., 1]
    return np.stack([dx, dy], axis=-1)


def corner_grad_to_state(g_corners, yaw, length, width):
    """Chain corner gradients (..., 4, 2) back to (d/dx, d/dy, d/dyaw)."""
    dyaw = corner_yaw_derivative(yaw, length, width)
    gx = g_corners[..., 0].sum(-1)
    gy = g_corners[..., 1].sum(-1)
    gpsi = (g_corners * dyaw).sum((-1, -2))
    return gx, gy, gpsi


def _edge_axes(c):
    # two unique edge directions of a rectangle, (B, 2, 2)
    return np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1]], axis=1)


def boxes_overlap_batch(a, b):
    """Separating-axis test on (B, 4, 2) corner arrays; touching counts as overlap."""
    a = np.asarray(a, float).reshape(-1, 4, 2)
    b = np.asarray(b, float).reshape(-1, 4, 2)
    axes = np.concatenate([_edge_axes(a), _edge_axes(b)], axis=1)  # (B, 4, 2)
    pa = np.einsum("bkd,bcd->bkc", axes, a)
    pb = np.einsum("bkd,bcd->bkc", axes, b)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return ~separated.any(-1)


def _point_segment(p, s, e):
    """Distances from points p (B,P,1,2) to segments s->e (B,1,S,2).

    Returns distance, clamped parameter t and the unit direction from the
    closest segment point to p (zero where the distance vanishes).
    """
    d = e - s
    rel = p - s
    den = (d * d).sum(-1)
    t = np.clip((rel * d).sum(-1) / np.where(den > 0, den, 1.0), 0.0, 1.0)
    diff = rel - t[..., None] * d
    dist = np.sqrt((diff * diff).sum(-1))
    u = diff / np.where(dist > 0, dist, 1.0)[..., None]
    return dist, t, u


def _feature_code(idx, t1, t2):
    rows = np.arange(len(idx))
    first = idx < 16
    j = np.where(first, idx, idx - 16)
    ci, ei = j // 4, j % 4
    t = np.where(first, t1[rows, np.minimum(idx, 15)], t2[rows, np.maximum(idx - 16, 0)])
    end = np.where(t >= 1.0, (ei + 1) % 4, ei)  # vertex hit when the projection is clamped
    at_vertex = (t <= 0.0) | (t >= 1.0)
    vv = np.where(first, 4 * ci + end, 4 * end + ci)
    edge = np.where(first, 16 + 4 * ci + ei, 32 + 4 * ei + ci)
    return np.where(at_vertex, vv, edge)


def box_distance_batch(a, b, with_grad=False):
    """Closest-point distance between rectangle pairs.

    Overlapping or touching pairs return exactly 0.  Otherwise the distance is
    the minimum over the 32 corner-to-edge distances (each box's corners
    against the other's edges), which equals the minimum over the 16
    edge-pair segment distances for non-intersecting rectangles.

    Returns ``(dist, branch)`` or ``(dist, branch, grad_a, grad_b)`` where
    ``branch`` is -1 for overlap and otherwise a code for the closest
    feature pair: 4*i + j for corner i of ``a`` and corner j of ``b``,
    16 + 4*i + j for corner i of ``a`` against the interior of edge j of
    ``b``, 32 + 4*i + j for the interior of edge i of ``a`` against corner j
    of ``b``.  Candidates that tie because they reach the same vertex pair
    share a code; other ties resolve to the first candidate.
    """
    a = np.asarray(a, float).reshape(-1, 4, 2)
    b = np.asarray(b, float).reshape(-1, 4, 2)
    nb = a.shape[0]
    overlap = boxes_overlap_batch(a, b)

    b_next = np.roll(b, -1, axis=1)
    a_next = np.roll(a, -1, axis=1)
    d1, t1, u1 = _point_segment(a[:, :, None, :], b[:, None, :, :], b_next[:, None, :, :])
    d2, t2, u2 = _point_segment(b[:, :, None, :], a[:, None, :, :], a_next[:, None, :, :])
    cand = np.concatenate([d1.reshape(nb, 16), d2.reshape(nb, 16)], axis=1)
    idx = cand.argmin(axis=1)
    rows = np.arange(nb)
    dist = cand[rows, idx]
    dist = np.where(overlap, 0.0, dist)
    branch = np.where(overlap, -1, _feature_code(idx, t1.reshape(nb, 16), t2.reshape(nb, 16)))
    if not with_grad:
        return dist, branch

    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    live = ~overlap
    first = live & (idx < 16)
    second = live & (idx >= 16)
    if first.any():
        r = rows[first]
        j = idx[first]
        ci, ei = j // 4, j % 4
        u = u1.reshape(nb, 16, 2)[r, j]
        t = t1.reshape(nb, 16)[r, j][:, None]
        np.add.at(ga, (r, ci), u)
        np.add.at(gb, (r, ei), -(1.0 - t) * u)
        np.add.at(gb, (r, (ei + 1) % 4), -t * u)
    if second.any():
        r = rows[second]
        j = idx[second] - 16
        ci, ei = j // 4, j % 4
        u = u2.reshape(nb, 16, 2)[r, j]
        t = t2.reshape(nb, 16)[r, j][:, None]
        np.add.at(gb, (r, ci), u)
        np.add.at(ga, (r, ei), -(1.0 - t) * u)
        np.add.at(ga, (r, (ei + 1) % 4), -t * u)
    return dist, branch, ga, gb


def agent_box(q, length, width) -> np.ndarray:
    """Corners (4, 2) of the box of a state row (x, y, speed, yaw)."""
    return box_corners(q[0], q[1], q[3], length, width)


def box_distance(a, b) -> float:
    """Distance between two single boxes given as (4, 2) corner arrays."""
    return float(box_distance_batch(a, b)[0][0])


def boxes_overlap(a, b) -> bool:
    return bool(boxes_overlap_batch(a, b)[0])


def overlap_polygon(a, b):
    """Intersection polygon of two convex boxes (Sutherland-Hodgman clipping).

    Returns an (m, 2) array, empty when the boxes are disjoint.
    """
    out = [tuple(p) for p in np.asarray(a, float)]
    clip = np.asarray(b, float)
    for i in range(4):
        if not out:
            break
        p0, p1 = clip[i], clip[(i + 1) % 4]
        edge = p1 - p0

        def inside(q):
            return edge[0] * (q[1] - p0[1]) - edge[1] * (q[0] - p0[0]) >= 0.0

        def cross_pt(q0, q1):
            d = np.subtract(q1, q0)
            den = edge[0] * d[1] - edge[1] * d[0]
            t = (edge[1] * (q0[0] - p0[0]) - edge[0] * (q0[1] - p0[1])) / den
            return (q0[0] + t * d[0], q0[1] + t * d[1])

        src, out = out, []
        for j in range(len(src)):
            cur, prev = src[j], src[j - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross_pt(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross_pt(prev, cur))
    return np.array(out, float).reshape(-1, 2)


def impact_point(a, b):
    """Centroid of the overlap region, or the midpoint of the closest points
    if the boxes only touch.  None when they are apart."""
    poly = overlap_polygon(a, b)
    if len(poly) >= 3:
        x, y = poly[:, 0], poly[:, 1]
        xs, ys = np.roll(x, -1), np.roll(y, -1)
        cr = x * ys - xs * y
        area = cr.sum() / 2.0
        if abs(area) > 1e-12:
            return np.array([((x + xs) * cr).sum(), ((y + ys) * cr).sum()]) / (6.0 * area)
    if len(poly):
        return poly.mean(axis=0)
    return None


def to_frame(point, origin, yaw):
    """Express a world point in the frame at ``origin`` rotated by ``yaw``."""
    d = np.asarray(point, float) - np.asarray(origin, float)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])
