"""
Bicycle-model fitting for recorded trajectories.

Recovers per-step (alpha, beta) actions from positions and fits each vehicle's
rear axis offset l_r by grid search in 1 cm steps up to half its length. The
recursion is driven by the replayed state, which makes the replay hit every
recorded position exactly; only headings can disagree, and the worst heading
disagreement is the fit loss.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from SHARED.drive_sdk.errors import FittingError, ShapeError
from SHARED.drive_sdk.kinematics import bicycle_step_array, recover_bicycle_actions_array
from SHARED.drive_sdk.logger import JsonLogger, NullLogger
from SHARED.drive_sdk.models import (
    AgentAttributes,
    AgentState,
    AgentType,
    BicycleAction,
    Scene,
    SceneAgent,
    Trajectory,
)

GRID_STEP_M = 0.01
TIE_TOLERANCE = 1e-12


class FitResult(BaseModel):
    """Recovered actions, fitted l_r and the replayed trajectory"""
    model_config = ConfigDict(frozen=True)

    actions: List[BicycleAction]
    l_r: float
    fit_loss: float
    replayed: Trajectory


class VehicleFit(BaseModel):
    """One row of the fit-kinematics table"""
    track_id: int
    length: float
    l_r: float
    fit_loss: float

    @property
    def ratio(self) -> float:
        return self.l_r / self.length


def _valid_span(traj: Trajectory) -> Tuple[int, int]:
    """First and last valid index; raises on fewer than 2 valid steps or interior gaps"""
    idx = traj.valid_indices()
    if len(idx) < 2:
        raise FittingError(f"trajectory needs at least 2 valid steps, has {len(idx)}")
    first, last = idx[0], idx[-1]
    if last - first + 1 != len(idx):
        raise FittingError(f"trajectory has gaps between steps {first} and {last}")
    return first, last


def _span_arrays(traj: Trajectory) -> np.ndarray:
    first, last = _valid_span(traj)
    return traj.to_array()[first:last + 1]


def lr_grid(length: float) -> np.ndarray:
    """Candidate l_r values 0.01, 0.02, ... up to length/2"""
    if not length > 0:
        raise FittingError(f"vehicle length must be positive, got {length}")
    n = int(np.floor(length / 2.0 / GRID_STEP_M + 1e-9))
    if n < 1:
        raise FittingError(f"vehicle length {length} is too short for a 1 cm grid")
    return np.round(GRID_STEP_M * np.arange(1, n + 1), 2)


def recover_actions(traj: Trajectory, l_r: float) -> List[BicycleAction]:
    """
    Bicycle actions for steps 2..T of the valid span.

    Args:
        traj: Recorded trajectory (contiguous valid span of at least 2 steps)
        l_r: Rear axis offset

    Returns:
        One action per transition
    """
    states = _span_arrays(traj)
    actions, _ = recover_bicycle_actions_array(states[:, :2], states[0], np.array([l_r]), traj.dt)
    return [BicycleAction(alpha=float(a), beta=float(b)) for a, b in actions[0]]


def replay(
    s1: AgentState,
    actions: Sequence[BicycleAction],
    l_r: float,
    dt: float,
) -> Trajectory:
    """Iterate the bicycle model from s1"""
    state = s1.as_array()
    rows = [state]
    for a in actions:
        state = bicycle_step_array(state, a.alpha, a.beta, l_r, dt)
        rows.append(state)
    return Trajectory.from_array(np.stack(rows), dt)


def fit_loss(replayed_psi: Sequence[float], gt_psi: Sequence[float]) -> float:
    """Worst-step heading disagreement, max_t 2(1 - cos(dpsi_t)), in [0, 4]"""
    a = np.asarray(replayed_psi, dtype=np.float64)
    b = np.asarray(gt_psi, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"heading sequences differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(2.0 * (1.0 - np.cos(a - b))))


def _grid_losses(
    states: np.ndarray, grid: np.ndarray, dt: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    actions, replayed = recover_bicycle_actions_array(states[:, :2], states[0], grid, dt)
    dpsi = replayed[:, 1:, 2] - states[None, 1:, 2]
    losses = np.max(2.0 * (1.0 - np.cos(dpsi)), axis=1)
    return losses, actions, replayed


def _pick(losses: np.ndarray) -> int:
    # ties within tolerance go to the largest l_r
    return int(np.flatnonzero(losses <= losses.min() + TIE_TOLERANCE)[-1])


def grid_search_lr(traj: Trajectory, length: float) -> Tuple[float, float]:
    """
    Fit l_r by exhaustive grid search.

    Returns:
        (l_r, fit_loss) of the best candidate

    Raises:
        FittingError: If the trajectory has fewer than 2 valid steps
    """
    result = fit_trajectory(traj, length)
    return result.l_r, result.fit_loss


def fit_trajectory(traj: Trajectory, length: float) -> FitResult:
    """Grid search plus the recovered actions and replay at the chosen l_r"""
    states = _span_arrays(traj)
    grid = lr_grid(length)
    losses, actions, replayed = _grid_losses(states, grid, traj.dt)
    best = _pick(losses)
    return FitResult(
        actions=[BicycleAction(alpha=float(a), beta=float(b)) for a, b in actions[best]],
        l_r=float(grid[best]),
        fit_loss=float(losses[best]),
        replayed=Trajectory.from_array(replayed[best], traj.dt),
    )


def rear_axis_histogram(
    results: Sequence[VehicleFit], bins: int = 20
) -> Tuple[np.ndarray, np.ndarray]:
    """Counts of l_r / length over [0, 0.5]"""
    ratios = np.array([r.ratio for r in results], dtype=np.float64)
    return np.histogram(ratios, bins=bins, range=(0.0, 0.5))


class KinematicsFitter:
    """
    Fits l_r for many vehicles.

    Vehicles are independent, so the work is spread over a thread pool.
    """

    def __init__(self, logger: Optional[JsonLogger] = None, threads: Optional[int] = None):
        """
        Initialize fitter.

        Args:
            logger: Logger for per-vehicle events
            threads: Worker cap (None: executor default)
        """
        self.logger = logger or NullLogger()
        self.threads = threads

    def _fit_one(
        self, track_id: int, traj: Trajectory, attributes: AgentAttributes
    ) -> Optional[VehicleFit]:
        try:
            l_r, loss = grid_search_lr(traj, attributes.length)
        except FittingError as exc:
            self.logger.warning("FIT_SKIPPED", track_id=track_id, reason=str(exc))
            return None
        self.logger.debug("FIT_COMPLETED", track_id=track_id, l_r=l_r, fit_loss=loss)
        return VehicleFit(track_id=track_id, length=attributes.length, l_r=l_r, fit_loss=loss)

    def fit_tracks(self, tracks: Dict[int, Tuple[AgentAttributes, Trajectory]]) -> List[VehicleFit]:
        """
        Fit every vehicle track.

        Args:
            tracks: track_id -> (attributes, trajectory)

        Returns:
            Fits sorted by track_id; non-vehicles and unfittable tracks are skipped
        """
        jobs = [
            (tid, traj, attrs)
            for tid, (attrs, traj) in sorted(tracks.items())
            if attrs.agent_type == AgentType.VEHICLE
        ]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            fits = list(pool.map(lambda job: self._fit_one(*job), jobs))
        results = [f for f in fits if f is not None]
        self.logger.info("FIT_BATCH_COMPLETED", vehicles=len(jobs), fitted=len(results))
        return results

    def fit_scene(self, scene: Scene) -> Scene:
        """Copy of the scene with each vehicle's rear_axis_offset set to its fitted value"""
        tracks = {i: (a.attributes, a.trajectory) for i, a in enumerate(scene.agents)}
        fitted = {f.track_id: f.l_r for f in self.fit_tracks(tracks)}
        agents: List[SceneAgent] = []
        for i, agent in enumerate(scene.agents):
            if i in fitted:
                attrs = agent.attributes.with_rear_axis(fitted[i])
                agent = agent.model_copy(update={"attributes": attrs})
            agents.append(agent)
        return scene.model_copy(update={"agents": agents})


def fit_scene(scene: Scene, threads: Optional[int] = None) -> Scene:
    """Module-level convenience wrapper around `KinematicsFitter.fit_scene`"""
    return KinematicsFitter(threads=threads).fit_scene(scene)


def apply_fits(scenes: Sequence[Scene], fits: Sequence[VehicleFit]) -> List[Scene]:
    """Scenes with each fitted track's rear_axis_offset replaced; other agents unchanged"""
    l_r = {f.track_id: f.l_r for f in fits}
    out: List[Scene] = []
    for scene in scenes:
        agents = [
            a.model_copy(update={"attributes": a.attributes.with_rear_axis(l_r[a.agent_id])})
            if a.agent_id in l_r else a
            for a in scene.agents
        ]
        out.append(scene.model_copy(update={"agents": agents}))
    return out
