"""Lane centerlines built from line and arc primitives, plus Frenet projection."""

from dataclasses import dataclass
import math

import numpy as np

MAX_PROJECTION_DIST = 50.0


class OffMapError(ValueError):
    pass


def wrap_angle(a):
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class Segment:
    x0: float
    y0: float
    heading0: float
    length: float
    curvature: float = 0.0  # 0 for a straight line, signed 1/R for an arc (left positive)

    @property
    def is_arc(self):
        return self.curvature != 0.0

    def pose_at(self, s):
        h0, k = self.heading0, self.curvature
        if not self.is_arc:
            return (self.x0 + s * math.cos(h0), self.y0 + s * math.sin(h0), h0)
        h = h0 + k * s
        r = 1.0 / k
        cx = self.x0 - r * math.sin(h0)
        cy = self.y0 + r * math.cos(h0)
        return (cx + r * math.sin(h), cy - r * math.cos(h), h)

    def end_pose(self):
        return self.pose_at(self.length)

    def project(self, x, y):
        """Closest point on this segment: (distance, s_local, heading, foot_x, foot_y)."""
        h0, k = self.heading0, self.curvature
        if not self.is_arc:
            c, sn = math.cos(h0), math.sin(h0)
            s = (x - self.x0) * c + (y - self.y0) * sn
            s = min(max(s, 0.0), self.length)
            fx, fy = self.x0 + s * c, self.y0 + s * sn
            return math.hypot(x - fx, y - fy), s, h0, fx, fy
        r = 1.0 / k
        cx = self.x0 - r * math.sin(h0)
        cy = self.y0 + r * math.cos(h0)
        # angle of the start point seen from the center, then sweep in the direction of travel
        a0 = math.atan2(self.y0 - cy, self.x0 - cx)
        a = math.atan2(y - cy, x - cx)
        sweep = (a - a0) % (2.0 * math.pi) if k > 0 else (a0 - a) % (2.0 * math.pi)
        total = abs(k) * self.length
        if sweep > total:
            # outside the arc's angular span: snap to the angularly nearer end
            sweep = total if sweep - total < 2.0 * math.pi - sweep else 0.0
        s = min(sweep / abs(k), self.length)
        fx, fy, h = self.pose_at(s)
        return math.hypot(x - fx, y - fy), s, h, fx, fy

    def offset(self, d):
        """Parallel segment shifted ``d`` meters to the left."""
        nx, ny = -math.sin(self.heading0), math.cos(self.heading0)
        length = self.length * (1.0 - self.curvature * d) if self.is_arc else self.length
        k = self.curvature / (1.0 - self.curvature * d) if self.is_arc else 0.0
        return Segment(self.x0 + d * nx, self.y0 + d * ny, self.heading0, length, k)


class Centerline:
    """An ordered, G1-continuous chain of segments.

    ``closed`` loops wrap arclength so vehicles can drive around indefinitely.
    """

    def __init__(self, segments, closed=False, tol=1e-6):
        if not segments:
            raise ValueError("centerline needs at least one segment")
        for a, b in zip(segments[:-1], segments[1:]):
            ex, ey, eh = a.end_pose()
            if math.hypot(ex - b.x0, ey - b.y0) > tol or abs(wrap_angle(eh - b.heading0)) > tol:
                raise ValueError("segments are not G1-continuous")
        for seg in segments:
            if not math.isfinite(seg.curvature) or seg.length <= 0:
                raise ValueError("bad segment")
        self.segments = tuple(segments)
        self.closed = closed
        self.starts = np.concatenate([[0.0], np.cumsum([s.length for s in segments])])
        self.total_length = float(self.starts[-1])

    def pose_at(self, s):
        if self.closed:
            s = s % self.total_length
        s = min(max(s, 0.0), self.total_length)
        i = int(np.searchsorted(self.starts, s, side="right")) - 1
        i = min(max(i, 0), len(self.segments) - 1)
        return self.segments[i].pose_at(s - self.starts[i])

    def curvature_at(self, s):
        if self.closed:
            s = s % self.total_length
        i = int(np.searchsorted(self.starts, s, side="right")) - 1
        i = min(max(i, 0), len(self.segments) - 1)
        return self.segments[i].curvature

    def project(self, x, y):
        """Return (distance, s_along, tangent heading, signed lateral offset)."""
        best = None
        for seg, s0 in zip(self.segments, self.starts):
            d, s, h, fx, fy = seg.project(x, y)
            if best is None or d < best[0]:
                best = (d, s0 + s, h, fx, fy)
        d, s, h, fx, fy = best
        lateral = math.cos(h) * (y - fy) - math.sin(h) * (x - fx)
        return d, s, h, lateral

    def offset(self, d):
        return Centerline([seg.offset(d) for seg in self.segments], closed=self.closed)

    def signed_gap(self, s_from, s_to):
        """Along-lane distance from ``s_from`` forward to ``s_to``."""
        gap = s_to - s_from
        if self.closed:
            gap = gap % self.total_length
        return gap


def frenet_project(cl, pose):
    """Project a vehicle pose onto a centerline.

    Returns ``(delta_y, delta_phi, s_along)`` with ``delta_y`` positive to the left.
    Raises OffMapError if the pose is more than 50 m from the line.
    """
    d, s, h, lateral = cl.project(pose.x, pose.y)
    if d > MAX_PROJECTION_DIST:
        raise OffMapError("off map")
    return lateral, wrap_angle(pose.yaw - h), s


def build_chain(x0, y0, heading0, pieces):
    """Chain ``(length, curvature)`` pieces into G1-continuous segments."""
    segs = []
    x, y, h = x0, y0, heading0
    for length, k in pieces:
        seg = Segment(x, y, h, float(length), float(k))
        segs.append(seg)
        x, y, h = seg.end_pose()
    return segs
