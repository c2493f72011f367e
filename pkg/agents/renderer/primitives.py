"""
Draw primitives for birdview rendering.

Geometry is expressed in the ego frame in meters (x forward, y left). Every
geometry exposes three things the rasterizers need:

- `signed_distance(xs, ys)`: exact signed distance, negative inside (numpy)
- `coverage_score(xs, ys)`: delta * d^2 with delta = +1 inside, -1 outside,
  as a differentiable tensor
- `bounds()`: axis-aligned extent used for the per-primitive window prefilter
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.autodiff import Tensor
from SHARED.drive_sdk.errors import EgoNotPresentError, GeometryError
from SHARED.drive_sdk.models import AgentAttributes, MapData

Color = Tuple[float, float, float]
Bounds = Tuple[float, float, float, float]

PALETTE: Dict[str, Color] = {
    "background": (1.0, 1.0, 1.0),
    "driveable": (0.35, 0.35, 0.35),
    "lane_line": (1.0, 1.0, 1.0),
    "agent": (0.2, 0.4, 1.0),
    "ego": (1.0, 0.2, 0.2),
}

LAYERS: Dict[str, float] = {
    "driveable": 0.0,
    "lane_line": 1.0,
    "agent": 2.0,
    "ego": 3.0,
}


def _segment_distance2(xs: np.ndarray, ys: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """
    Squared distance from each pixel to the nearest of S segments.

    Args:
        xs, ys: (h, w) pixel coordinates
        a, b: (S, 2) segment endpoints

    Returns:
        (h, w) minimum squared distance
    """
    ex = (b[:, 0] - a[:, 0]).reshape(-1, 1, 1)
    ey = (b[:, 1] - a[:, 1]).reshape(-1, 1, 1)
    px = ad.sub(xs[None], a[:, 0].reshape(-1, 1, 1))
    py = ad.sub(ys[None], a[:, 1].reshape(-1, 1, 1))
    len2 = ex * ex + ey * ey
    t = ad.clip((px * ex + py * ey) / len2, 0.0, 1.0)
    qx = px - t * ex
    qy = py - t * ey
    return (qx * qx + qy * qy).min(axis=0)


def _drop_repeated(points: Tensor, closed: bool) -> Tensor:
    pts = points.data
    nxt = np.roll(pts, -1, axis=0) if closed else pts[1:]
    same = np.all(pts[: len(nxt)] == nxt, axis=1)
    if not same.any():
        return points
    keep = np.flatnonzero(~np.concatenate([same, np.zeros(len(pts) - len(same), dtype=bool)]))
    return points[keep]


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle with center, heading angle and extents"""
    center: Tensor
    length: float
    width: float
    angle: Tensor

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise GeometryError(f"box must have positive area, got {self.length} x {self.width}")
        object.__setattr__(self, "center", ad.as_tensor(self.center))
        object.__setattr__(self, "angle", ad.as_tensor(self.angle))

    def _local(self, xs, ys):
        c, s = ad.cos(self.angle), ad.sin(self.angle)
        dx = ad.sub(xs, self.center[0])
        dy = ad.sub(ys, self.center[1])
        return c * dx + s * dy, c * dy - s * dx

    def signed_distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        qx, qy = self._local(np.asarray(xs, float), np.asarray(ys, float))
        ex = np.abs(qx.data) - self.length / 2.0
        ey = np.abs(qy.data) - self.width / 2.0
        outside = np.hypot(np.maximum(ex, 0.0), np.maximum(ey, 0.0))
        return outside + np.minimum(np.maximum(ex, ey), 0.0)

    def coverage_score(self, xs: np.ndarray, ys: np.ndarray) -> Tensor:
        qx, qy = self._local(xs, ys)
        ex = ad.abs_(qx) - self.length / 2.0
        ey = ad.abs_(qy) - self.width / 2.0
        inside = ad.minimum(ad.maximum(ex, ey), 0.0)
        return ad.square(inside) - ad.square(ad.relu(ex)) - ad.square(ad.relu(ey))

    def bounds(self) -> Bounds:
        r = 0.5 * float(np.hypot(self.length, self.width))
        cx, cy = self.center.data
        return (cx - r, cx + r, cy - r, cy + r)


@dataclass(frozen=True)
class ConvexPolygon:
    """Closed polygon; the inside test is even-odd so simple non-convex outlines also work"""
    vertices: Tensor

    def __post_init__(self):
        verts = _drop_repeated(ad.as_tensor(self.vertices), closed=True)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise GeometryError(
                f"polygon needs at least 3 distinct vertices, got shape {verts.shape}"
            )
        object.__setattr__(self, "vertices", verts)

    def _edges(self) -> Tuple[Tensor, Tensor]:
        a = self.vertices
        b = ad.concat([a[1:], a[:1]], axis=0)
        return a, b

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        v = self.vertices.data
        ax, ay = v[:, 0, None, None], v[:, 1, None, None]
        w = np.roll(v, -1, axis=0)
        bx, by = w[:, 0, None, None], w[:, 1, None, None]
        straddles = (ay > ys) != (by > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = (bx - ax) * (ys - ay) / (by - ay) + ax
        crossings = straddles & (xs < x_cross)
        return (np.count_nonzero(crossings, axis=0) % 2) == 1

    def signed_distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        a, b = self._edges()
        d = np.sqrt(_segment_distance2(xs, ys, a.detach(), b.detach()).data)
        return np.where(self.contains(xs, ys), -d, d)

    def coverage_score(self, xs: np.ndarray, ys: np.ndarray) -> Tensor:
        a, b = self._edges()
        d2 = _segment_distance2(xs, ys, a, b)
        return ad.where(self.contains(xs, ys), d2, -d2)

    def bounds(self) -> Bounds:
        v = self.vertices.data
        return (v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())


@dataclass(frozen=True)
class ThickPolyline:
    """Open polyline drawn with a half-width"""
    points: Tensor
    half_width: float

    def __post_init__(self):
        pts = _drop_repeated(ad.as_tensor(self.points), closed=False)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise GeometryError(f"polyline needs at least 2 distinct points, got shape {pts.shape}")
        if not self.half_width > 0:
            raise GeometryError("polyline half width must be positive")
        object.__setattr__(self, "points", pts)

    def _distance(self, xs, ys, detach: bool) -> Tensor:
        p = self.points.detach() if detach else self.points
        return ad.sqrt(_segment_distance2(xs, ys, p[:-1], p[1:])) - self.half_width

    def signed_distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return self._distance(np.asarray(xs, float), np.asarray(ys, float), True).data

    def coverage_score(self, xs: np.ndarray, ys: np.ndarray) -> Tensor:
        sd = self._distance(xs, ys, False)
        return -(sd * ad.abs_(sd))

    def bounds(self) -> Bounds:
        p = self.points.data
        h = self.half_width
        return (p[:, 0].min() - h, p[:, 0].max() + h, p[:, 1].min() - h, p[:, 1].max() + h)


Geometry = Union[OrientedBox, ConvexPolygon, ThickPolyline]


@dataclass(frozen=True)
class DrawPrimitive:
    """Geometry with a flat color and a layer depth (larger is nearer)"""
    geometry: Geometry
    color: Color
    layer: float = 0.0

    def __post_init__(self):
        if len(self.color) != 3 or any(not 0.0 <= c <= 1.0 for c in self.color):
            raise GeometryError(f"color components must lie in [0, 1], got {self.color}")


def signed_distance(point: Sequence[float], geometry: Geometry) -> float:
    """Signed distance in meters from one point to a geometry, negative inside"""
    xs = np.array([[float(point[0])]])
    ys = np.array([[float(point[1])]])
    return float(geometry.signed_distance(xs, ys)[0, 0])


def to_ego_frame_t(points, ego_xy: Tensor, ego_psi: Tensor) -> Tensor:
    """Differentiable world-to-ego transform for (..., 2) points"""
    pts = ad.as_tensor(points)
    c, s = ad.cos(ego_psi), ad.sin(ego_psi)
    dx = pts[..., 0] - ego_xy[0]
    dy = pts[..., 1] - ego_xy[1]
    return ad.stack([c * dx + s * dy, c * dy - s * dx], axis=-1)


def scene_to_primitives(
    states,
    attributes: Sequence[AgentAttributes],
    valid: Sequence[bool],
    map_data: MapData,
    ego_index: int,
) -> List[DrawPrimitive]:
    """
    Primitives for an ego-centered, ego-rotated birdview.

    Args:
        states: (N, 4) joint state at one step (Tensor or array)
        attributes: Per-agent attributes
        valid: Per-agent presence at this step
        map_data: Global-frame map
        ego_index: Agent the view is rendered for

    Returns:
        Map polygons, lane lines, other agents and finally the ego box

    Raises:
        EgoNotPresentError: If the ego is not valid at this step
    """
    states = ad.as_tensor(states)
    valid = np.asarray(valid, dtype=bool)
    if not 0 <= ego_index < len(valid) or not valid[ego_index]:
        raise EgoNotPresentError(f"ego agent {ego_index} is not present at this step")
    ego = states[ego_index]
    ego_xy, ego_psi = ego[:2], ego[2]

    prims: List[DrawPrimitive] = []
    for poly in map_data.driveable_polygons:
        verts = to_ego_frame_t(np.asarray(poly, dtype=float), ego_xy, ego_psi)
        prims.append(DrawPrimitive(ConvexPolygon(verts), PALETTE["driveable"], LAYERS["driveable"]))
    for line in map_data.lane_lines:
        pts = to_ego_frame_t(np.asarray(line.points, dtype=float), ego_xy, ego_psi)
        strip = ThickPolyline(pts, line.half_width)
        prims.append(DrawPrimitive(strip, PALETTE["lane_line"], LAYERS["lane_line"]))

    def box(j: int) -> OrientedBox:
        center = to_ego_frame_t(states[j, :2], ego_xy, ego_psi)
        heading = states[j, 2] - ego_psi
        return OrientedBox(center, attributes[j].length, attributes[j].width, heading)

    for j in range(len(valid)):
        if j != ego_index and valid[j]:
            prims.append(DrawPrimitive(box(j), PALETTE["agent"], LAYERS["agent"]))
    prims.append(DrawPrimitive(box(ego_index), PALETTE["ego"], LAYERS["ego"]))
    return prims
