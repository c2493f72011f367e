"""
Pydantic models for the simulator's domain types.

Agent states, attributes, trajectories, maps, scenes and the per-mode action
records. All models are frozen value types and safe to share across threads.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ShapeError
from .geometry import wrap_angle


# Enums
class AgentType(str, Enum):
    """Agent classes present in track files"""
    VEHICLE = "vehicle"
    PEDESTRIAN_BICYCLE = "pedestrian_bicycle"


class KinematicMode(str, Enum):
    """State-transition models an agent can act through"""
    BICYCLE = "bicycle"
    UNCONSTRAINED = "unconstrained"
    DISPLACEMENT = "displacement"
    ORIENTED_UNCONSTRAINED = "oriented_unconstrained"
    ORIENTED_DISPLACEMENT = "oriented_displacement"


def _require_finite(v: float) -> float:
    if not math.isfinite(v):
        raise ValueError("value must be finite")
    return v


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True)


# States and actions
class AgentState(_Frozen):
    """Pose and speed of one agent at one timestep"""
    x: float
    y: float
    psi: float = 0.0
    v: float = 0.0

    @field_validator("x", "y", "v")
    @classmethod
    def validate_finite(cls, v: float) -> float:
        return _require_finite(v)

    @field_validator("psi")
    @classmethod
    def validate_heading(cls, v: float) -> float:
        return wrap_angle(_require_finite(v))

    def as_array(self) -> np.ndarray:
        """State as a float64 array ordered (x, y, psi, v)"""
        return np.array([self.x, self.y, self.psi, self.v], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "AgentState":
        return cls(x=float(arr[0]), y=float(arr[1]), psi=float(arr[2]), v=float(arr[3]))


class BicycleAction(_Frozen):
    """Acceleration at the vehicle center and slip angle"""
    alpha: float
    beta: float

    @field_validator("alpha")
    @classmethod
    def validate_alpha(cls, v: float) -> float:
        return _require_finite(v)

    @field_validator("beta")
    @classmethod
    def validate_beta(cls, v: float) -> float:
        return wrap_angle(_require_finite(v))

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta], dtype=np.float64)


class UnconstrainedAction(_Frozen):
    """Delta between subsequent state vectors"""
    dx: float = 0.0
    dy: float = 0.0
    dpsi: float = 0.0
    dv: float = 0.0

    @field_validator("dx", "dy", "dpsi", "dv")
    @classmethod
    def validate_finite(cls, v: float) -> float:
        return _require_finite(v)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dpsi, self.dv], dtype=np.float64)


class DisplacementAction(_Frozen):
    """Position delta; the bicycle model fills in heading and speed"""
    dx: float = 0.0
    dy: float = 0.0

    @field_validator("dx", "dy")
    @classmethod
    def validate_finite(cls, v: float) -> float:
        return _require_finite(v)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy], dtype=np.float64)


# Agents and trajectories
class AgentAttributes(_Frozen):
    """Immutable physical attributes of an agent"""
    length: float = Field(gt=0)
    width: float = Field(gt=0)
    rear_axis_offset: float = Field(gt=0)
    agent_type: AgentType = AgentType.VEHICLE

    @model_validator(mode="after")
    def validate_rear_axis(self) -> "AgentAttributes":
        # Small slack so that grid values like round(length/2, 2) pass.
        if self.rear_axis_offset > self.length / 2 + 1e-9:
            raise ValueError("rear_axis_offset must not exceed half the length")
        return self

    def with_rear_axis(self, rear_axis_offset: float) -> "AgentAttributes":
        return self.model_copy(update={"rear_axis_offset": float(rear_axis_offset)})


class Trajectory(_Frozen):
    """States on a uniform time grid with a presence mask"""
    states: List[AgentState]
    dt: float = Field(gt=0)
    valid_mask: List[bool]

    @model_validator(mode="after")
    def validate_lengths(self) -> "Trajectory":
        if len(self.states) != len(self.valid_mask):
            raise ValueError("states and valid_mask must have the same length")
        return self

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def from_array(
        cls,
        states: np.ndarray,
        dt: float,
        valid_mask: Optional[Sequence[bool]] = None,
    ) -> "Trajectory":
        """Build from a (T, 4) array; invalid rows are replaced by a zero placeholder"""
        arr = np.asarray(states, dtype=np.float64)
        mask = [True] * len(arr) if valid_mask is None else [bool(m) for m in valid_mask]
        rows = [
            AgentState.from_array(row) if ok else AgentState(x=0.0, y=0.0)
            for row, ok in zip(arr, mask)
        ]
        return cls(states=rows, dt=dt, valid_mask=mask)

    def to_array(self) -> np.ndarray:
        """(T, 4) array ordered (x, y, psi, v)"""
        if not self.states:
            return np.zeros((0, 4))
        return np.stack([s.as_array() for s in self.states])

    def positions(self) -> np.ndarray:
        return self.to_array()[:, :2]

    def mask_array(self) -> np.ndarray:
        return np.asarray(self.valid_mask, dtype=bool)

    def valid_indices(self) -> List[int]:
        return [i for i, ok in enumerate(self.valid_mask) if ok]


# Map
class LaneLine(_Frozen):
    """Painted line with a physical width"""
    points: List[Tuple[float, float]]
    width: float = Field(gt=0)

    @field_validator("points")
    @classmethod
    def validate_points(cls, v: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        if len(v) < 2:
            raise ValueError("lane line needs at least 2 points")
        for p in v:
            _require_finite(p[0])
            _require_finite(p[1])
        return v

    @property
    def half_width(self) -> float:
        return self.width / 2.0


class MapData(_Frozen):
    """Driveable area and lane markings in the global frame"""
    driveable_polygons: List[List[Tuple[float, float]]] = Field(default_factory=list)
    lane_lines: List[LaneLine] = Field(default_factory=list)

    @field_validator("driveable_polygons")
    @classmethod
    def validate_polygons(
        cls, v: List[List[Tuple[float, float]]]
    ) -> List[List[Tuple[float, float]]]:
        for i, poly in enumerate(v):
            if len(poly) < 3:
                raise ValueError(f"polygon {i} has {len(poly)} vertices, needs at least 3")
            for p in poly:
                _require_finite(p[0])
                _require_finite(p[1])
        return v


# Scenes
class SceneAgent(_Frozen):
    """One agent of a scene: source id, attributes and trajectory"""
    agent_id: int
    attributes: AgentAttributes
    trajectory: Trajectory


class Scene(_Frozen):
    """N agents on a shared time grid plus a map"""
    scene_id: str = "scene"
    agents: List[SceneAgent]
    map: MapData = Field(default_factory=MapData)
    t_obs: int
    horizon: int

    @model_validator(mode="after")
    def validate_window(self) -> "Scene":
        if not 1 <= self.t_obs < self.horizon:
            raise ValueError(
                f"need 1 <= t_obs < horizon, got t_obs={self.t_obs}, horizon={self.horizon}"
            )
        dts = {a.trajectory.dt for a in self.agents}
        if len(dts) > 1:
            raise ValueError("all trajectories must share dt")
        for a in self.agents:
            if len(a.trajectory) != self.horizon:
                raise ValueError(
                    f"agent {a.agent_id} has {len(a.trajectory)} slots, expected {self.horizon}"
                )
        return self

    @property
    def dt(self) -> float:
        return self.agents[0].trajectory.dt if self.agents else 0.1

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def agent_ids(self) -> List[int]:
        return [a.agent_id for a in self.agents]

    @property
    def attributes(self) -> List[AgentAttributes]:
        return [a.attributes for a in self.agents]

    def states_array(self) -> np.ndarray:
        """(N, T, 4) joint ground-truth states"""
        if not self.agents:
            return np.zeros((0, self.horizon, 4))
        return np.stack([a.trajectory.to_array() for a in self.agents])

    def valid_array(self) -> np.ndarray:
        """(N, T) presence mask"""
        if not self.agents:
            return np.zeros((0, self.horizon), dtype=bool)
        return np.stack([a.trajectory.mask_array() for a in self.agents])

    def state_array(self, t: int) -> np.ndarray:
        """(N, 4) joint state at step t"""
        return self.states_array()[:, t, :]

    def valid_at(self, t: int) -> np.ndarray:
        return self.valid_array()[:, t]

    def rear_axis_offsets(self) -> np.ndarray:
        return np.array([a.attributes.rear_axis_offset for a in self.agents], dtype=np.float64)

    def index_of(self, agent_id: int) -> int:
        for i, a in enumerate(self.agents):
            if a.agent_id == agent_id:
                return i
        raise KeyError(f"agent {agent_id} not in scene {self.scene_id}")


# Rollout results
class RolloutMode(str, Enum):
    """How future steps are driven during a rollout"""
    GENERATIVE = "generative"
    CLASSMATES_FORCING = "classmates_forcing"
    BLANK_FUTURE = "blank_future"
    TEACHER_FORCED = "teacher_forced"


@dataclass
class RolloutResult:
    """
    K sampled futures for the predicted agents of one scene.

    Arrays are indexed (sample, agent, step); step s is scene step t_obs + s.
    `actions` and `z` are None when loaded from a CSV export.
    """
    scene_id: str
    agent_ids: List[int]
    t_obs: int
    horizon: int
    states: np.ndarray
    actions: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    mode: RolloutMode = RolloutMode.GENERATIVE
    seed: int = 0
    model_checksum: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        expected = (len(self.agent_ids), self.horizon - self.t_obs, 4)
        if self.states.ndim != 4 or self.states.shape[1:] != expected:
            raise ShapeError(f"states must be (K,) + {expected}, got {self.states.shape}")
        self.mode = RolloutMode(self.mode)

    @property
    def k_samples(self) -> int:
        return self.states.shape[0]

    @property
    def num_steps(self) -> int:
        return self.horizon - self.t_obs

    @property
    def steps(self) -> List[int]:
        return list(range(self.t_obs, self.horizon))

    def positions(self) -> np.ndarray:
        """(K, N, S, 2) predicted positions"""
        return self.states[..., :2]

    def trajectory(self, k: int, agent_id: int, dt: float) -> Trajectory:
        return Trajectory.from_array(self.states[k, self.agent_ids.index(agent_id)], dt)

    def num_rows(self) -> int:
        return int(self.states.shape[0] * self.states.shape[1] * self.states.shape[2])
