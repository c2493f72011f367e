"""
Procedural toy datasets.

Every trajectory is produced by iterating the discrete bicycle model with an
l_r on the 1 cm grid, so recovering actions and fitting l_r is exact.

Kinds:
    straight         parallel lanes along +x, constant speed per agent
    fork             one trunk splitting into two branches, 50/50 branch choice
    roundabout-lite  circular lane with two exits, 50/50 exit choice
"""

import math
from typing import Callable, List, Tuple

import numpy as np

from .kinematics import bicycle_step_array
from .models import AgentAttributes, LaneLine, MapData, Scene, SceneAgent, Trajectory

SYNTH_KINDS = ("straight", "fork", "roundabout-lite")

LANE_WIDTH_M = 3.5
LINE_WIDTH_M = 0.2
FORK_ANGLE_RAD = 0.35
FORK_GAIN = 0.6
MAX_SLIP_RAD = 0.3
ROUNDABOUT_RADIUS_M = 20.0
ROUNDABOUT_EXITS_RAD = (math.pi / 4.0, 3.0 * math.pi / 4.0)

Controller = Callable[[int, np.ndarray], float]


def _vehicle(rng: np.random.Generator) -> AgentAttributes:
    length = round(float(rng.uniform(4.0, 5.0)), 2)
    width = round(float(rng.uniform(1.7, 2.0)), 2)
    l_r = round(math.floor(float(rng.uniform(0.3, 0.5)) * length * 100.0) / 100.0, 2)
    return AgentAttributes(length=length, width=width, rear_axis_offset=l_r)


def _drive(initial: np.ndarray, steer: Controller, l_r: float, steps: int, dt: float) -> np.ndarray:
    """Roll the bicycle model with zero acceleration and slip from `steer`"""
    states = np.zeros((steps, 4))
    states[0] = initial
    for t in range(1, steps):
        beta = steer(t - 1, states[t - 1])
        states[t] = bicycle_step_array(states[t - 1], 0.0, beta, l_r, dt)
    return states


def _agent(agent_id: int, attrs: AgentAttributes, states: np.ndarray, dt: float) -> SceneAgent:
    trajectory = Trajectory.from_array(states, dt)
    return SceneAgent(agent_id=agent_id, attributes=attrs, trajectory=trajectory)


def _rect(
    x0: float, x1: float, half: float, angle: float = 0.0, origin=(0.0, 0.0)
) -> List[Tuple[float, float]]:
    c, s = math.cos(angle), math.sin(angle)
    corners = [(x0, -half), (x1, -half), (x1, half), (x0, half)]
    return [(origin[0] + c * x - s * y, origin[1] + s * x + c * y) for x, y in corners]


# Maps
def straight_map(lanes: int = 3, length_m: float = 400.0) -> MapData:
    half = lanes * LANE_WIDTH_M / 2.0
    lines = [
        LaneLine(
            points=[(-50.0, -half + i * LANE_WIDTH_M), (length_m, -half + i * LANE_WIDTH_M)],
            width=LINE_WIDTH_M,
        )
        for i in range(lanes + 1)
    ]
    return MapData(driveable_polygons=[_rect(-50.0, length_m, half)], lane_lines=lines)


def fork_map() -> MapData:
    half = LANE_WIDTH_M
    polygons = [_rect(-80.0, 0.0, half)]
    lines = [LaneLine(points=[(-80.0, 0.0), (0.0, 0.0)], width=LINE_WIDTH_M)]
    for sign in (1.0, -1.0):
        angle = sign * FORK_ANGLE_RAD
        polygons.append(_rect(-2.0, 80.0, half, angle))
        tip = (80.0 * math.cos(angle), 80.0 * math.sin(angle))
        lines.append(LaneLine(points=[(0.0, 0.0), tip], width=LINE_WIDTH_M))
    return MapData(driveable_polygons=polygons, lane_lines=lines)


def roundabout_map(segments: int = 32) -> MapData:
    outer = ROUNDABOUT_RADIUS_M + LANE_WIDTH_M
    angles = np.linspace(0.0, 2.0 * math.pi, segments, endpoint=False)
    ring = [(outer * math.cos(a), outer * math.sin(a)) for a in angles]
    center = [
        (ROUNDABOUT_RADIUS_M * math.cos(a), ROUNDABOUT_RADIUS_M * math.sin(a))
        for a in np.linspace(0.0, 2.0 * math.pi, segments + 1)
    ]
    polygons = [ring]
    for phi in ROUNDABOUT_EXITS_RAD:
        tangent = phi + math.pi / 2.0
        origin = (ROUNDABOUT_RADIUS_M * math.cos(phi), ROUNDABOUT_RADIUS_M * math.sin(phi))
        polygons.append(_rect(0.0, 60.0, LANE_WIDTH_M / 2.0, tangent, origin))
    ring_line = LaneLine(points=center, width=LINE_WIDTH_M)
    return MapData(driveable_polygons=polygons, lane_lines=[ring_line])


# Scenes
def _straight_scene(rng: np.random.Generator, horizon: int, dt: float) -> List[SceneAgent]:
    lanes = 3
    n = int(rng.integers(1, lanes + 1))
    agents = []
    for i, lane in enumerate(sorted(rng.choice(lanes, size=n, replace=False))):
        attrs = _vehicle(rng)
        y = -LANE_WIDTH_M * (lanes - 1) / 2.0 + lane * LANE_WIDTH_M
        v = float(rng.uniform(8.0, 12.0))
        initial = np.array([rng.uniform(0.0, 20.0), y, 0.0, v])
        states = _drive(initial, lambda t, s: 0.0, attrs.rear_axis_offset, horizon, dt)
        agents.append(_agent(i, attrs, states, dt))
    return agents


def _fork_scene(rng: np.random.Generator, horizon: int, dt: float) -> List[SceneAgent]:
    attrs = _vehicle(rng)
    v = float(rng.uniform(8.0, 12.0))
    # reach the split between 1.2 s and 2.0 s into the scene
    x0 = -v * float(rng.uniform(1.2, 2.0))
    target = FORK_ANGLE_RAD if rng.random() < 0.5 else -FORK_ANGLE_RAD

    def steer(t: int, s: np.ndarray) -> float:
        if s[0] < 0.0:
            return 0.0
        return float(np.clip(FORK_GAIN * (target - s[2]), -MAX_SLIP_RAD, MAX_SLIP_RAD))

    states = _drive(np.array([x0, 0.0, 0.0, v]), steer, attrs.rear_axis_offset, horizon, dt)
    return [_agent(0, attrs, states, dt)]


class _RingController:
    """Constant slip on the ring until the chosen exit, then straight"""

    def __init__(self, phi0: float, exit_at: float, beta_ring: float):
        self.phi0 = phi0
        self.travel = (exit_at - phi0) % (2.0 * math.pi)
        self.beta_ring = beta_ring
        self.exited = False

    def __call__(self, t: int, s: np.ndarray) -> float:
        swept = (math.atan2(s[1], s[0]) - self.phi0) % (2.0 * math.pi)
        if self.travel <= swept < self.travel + math.pi:
            self.exited = True
        return 0.0 if self.exited else self.beta_ring


def _roundabout_scene(rng: np.random.Generator, horizon: int, dt: float) -> List[SceneAgent]:
    n = int(rng.integers(1, 3))
    starts = rng.uniform(-0.2, 0.2, size=n) - 1.2 * np.arange(n)
    agents = []
    for i, phi0 in enumerate(starts):
        attrs = _vehicle(rng)
        l_r = attrs.rear_axis_offset
        v = float(rng.uniform(6.0, 9.0))
        beta_ring = math.asin(l_r / ROUNDABOUT_RADIUS_M)
        exit_at = ROUNDABOUT_EXITS_RAD[int(rng.integers(0, 2))]
        x0, y0 = ROUNDABOUT_RADIUS_M * math.cos(phi0), ROUNDABOUT_RADIUS_M * math.sin(phi0)
        psi0 = phi0 + math.pi / 2.0 - beta_ring

        steer = _RingController(phi0, exit_at, beta_ring)
        states = _drive(np.array([x0, y0, psi0, v]), steer, l_r, horizon, dt)
        agents.append(_agent(i, attrs, states, dt))
    return agents


_BUILDERS = {
    "straight": (_straight_scene, straight_map),
    "fork": (_fork_scene, fork_map),
    "roundabout-lite": (_roundabout_scene, roundabout_map),
}


def synth_dataset(
    kind: str,
    n_scenes: int,
    seed: int = 0,
    t_obs: int = 10,
    horizon: int = 40,
    dt: float = 0.1,
) -> Tuple[List[Scene], MapData]:
    """
    Generate a toy dataset.

    Args:
        kind: "straight", "fork" or "roundabout-lite"
        n_scenes: Number of scenes (at least 1)
        seed: Generator seed
        t_obs: Observed steps per scene
        horizon: Steps per scene
        dt: Step length

    Returns:
        (scenes, shared map); agents carry their generating l_r as rear_axis_offset
    """
    if kind not in _BUILDERS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {SYNTH_KINDS}")
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    build_scene, build_map = _BUILDERS[kind]
    map_data = build_map()
    rng = np.random.default_rng(np.random.SeedSequence([seed, SYNTH_KINDS.index(kind)]))
    scenes = [
        Scene(
            scene_id=f"{kind}-{i:05d}",
            agents=build_scene(rng, horizon, dt),
            map=map_data,
            t_obs=t_obs,
            horizon=horizon,
        )
        for i in range(n_scenes)
    ]
    return scenes, map_data
