"""
Angle and reference-frame arithmetic.

Plain-float helpers used by the value types in `models` and by the fitting and
io layers. The differentiable counterparts live in `kinematics` and operate on
autodiff tensors.
"""

import math
from typing import TYPE_CHECKING, Iterable, Tuple

import numpy as np

from .errors import NonFiniteError

if TYPE_CHECKING:  # pragma: no cover
    from .models import AgentState

TWO_PI = 2.0 * math.pi

# Values this close above -pi are canonicalized to +pi so that float error in
# inputs such as 3*pi does not land on the excluded end of (-pi, pi].
ANGLE_EPS = 1e-12

Point = Tuple[float, float]


def wrap_angle(theta: float) -> float:
    """
    Wrap an angle to (-pi, pi].

    Args:
        theta: Angle in radians (finite)

    Returns:
        Equivalent angle in (-pi, pi]; wrap_angle(wrap_angle(x)) == wrap_angle(x) exactly

    Raises:
        NonFiniteError: If theta is NaN or infinite
    """
    if not math.isfinite(theta):
        raise NonFiniteError(f"Cannot wrap non-finite angle {theta!r}")
    # fmod is exact, so values already in range come back bit-identical.
    r = math.fmod(theta, TWO_PI)
    if r > math.pi:
        r -= TWO_PI
    if r <= -math.pi + ANGLE_EPS:
        r += TWO_PI
    return r


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Elementwise `wrap_angle` over an array (same arithmetic, bit-identical results)"""
    arr = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("Cannot wrap non-finite angles")
    r = np.fmod(arr, TWO_PI)
    r = np.where(r > math.pi, r - TWO_PI, r)
    r = np.where(r <= -math.pi + ANGLE_EPS, r + TWO_PI, r)
    return r


def rotate(p: Point, angle: float) -> Point:
    """Rotate a point counter-clockwise by angle about the origin"""
    c, s = math.cos(angle), math.sin(angle)
    return (c * p[0] - s * p[1], s * p[0] + c * p[1])


def to_ego_frame(p: Point, ego: "AgentState") -> Point:
    """
    Express a world point in the ego frame.

    The ego position maps to the origin and the ego heading to the +x axis:
    result = R(-psi) (p - (x, y)).
    """
    return rotate((p[0] - ego.x, p[1] - ego.y), -ego.psi)


def from_ego_frame(p: Point, ego: "AgentState") -> Point:
    """Inverse of `to_ego_frame`"""
    q = rotate(p, ego.psi)
    return (q[0] + ego.x, q[1] + ego.y)


def to_ego_frame_array(points: np.ndarray, ego_xy: Iterable[float], ego_psi: float) -> np.ndarray:
    """Vectorized `to_ego_frame` for an (..., 2) array of world points"""
    pts = np.asarray(points, dtype=np.float64)
    ex, ey = ego_xy
    c, s = math.cos(ego_psi), math.sin(ego_psi)
    dx = pts[..., 0] - ex
    dy = pts[..., 1] - ey
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)
