"""
Joint multi-agent rollouts.

Every predicted agent observes an ego-centric birdview of the current joint
state, draws z from the prior, decodes an action and steps its kinematic
model. All agents act on the same frozen snapshot, so the order of agents in a
scene has no effect. The observed window 0..t_obs-1 is replayed from ground
truth before the first prediction (warmup).

Random numbers come from one generator per (seed, sample, agent_id), which
keeps samples independent and results independent of agent order and of the
thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.config_loader import BirdviewConfig
from SHARED.drive_sdk.errors import EgoNotPresentError, ShapeError
from SHARED.drive_sdk.geometry import wrap_angle_array
from SHARED.drive_sdk.kinematics import ActionLimits, ground_truth_actions
from SHARED.drive_sdk.logger import JsonLogger, NullLogger
from SHARED.drive_sdk.models import RolloutMode, RolloutResult, Scene

from agents.driver.model import AgentRuntimeState, CVRNNDriver
from agents.driver.networks import Params
from agents.evaluator.metrics import MetricReport, build_report, evaluate_scene
from agents.renderer.rasterizer import blank_birdview, render_agents

__all__ = [
    "RolloutConfig",
    "RolloutMode",
    "RolloutResult",
    "StepOutput",
    "active_agents",
    "agent_rngs",
    "warmup",
    "step_joint",
    "rollout",
    "rollout_many",
    "evaluate_rollouts",
]


class RolloutConfig(BaseModel):
    """Sampling settings for one rollout call"""
    model_config = ConfigDict(frozen=True)

    k_samples: int = Field(default=6, ge=1)
    mode: RolloutMode = RolloutMode.GENERATIVE
    ego_index: Optional[int] = Field(default=None, ge=0)
    seed: int = Field(default=0, ge=0)
    noise_on_states: bool = False
    threads: Optional[int] = Field(default=None, ge=1)
    limits: Optional[ActionLimits] = None

    @model_validator(mode="after")
    def validate_ego(self) -> "RolloutConfig":
        if self.mode == RolloutMode.CLASSMATES_FORCING and self.ego_index is None:
            raise ValueError("classmates forcing needs ego_index")
        return self


@dataclass
class StepOutput:
    """Result of one joint step"""
    joint_states: np.ndarray
    joint_valid: np.ndarray
    predicted: np.ndarray
    actions: np.ndarray
    runtime: AgentRuntimeState


def active_agents(scene: Scene) -> List[int]:
    """Indices of agents present at every observed step"""
    valid = scene.valid_array()
    if valid.size == 0:
        return []
    return [int(i) for i in np.flatnonzero(valid[:, :scene.t_obs].all(axis=1))]


def agent_rngs(seed: int, sample: int, agent_ids: Sequence[int]) -> List[np.random.Generator]:
    return [
        np.random.default_rng(np.random.SeedSequence([seed, sample, int(a)])) for a in agent_ids
    ]


def _prior(model: CVRNNDriver, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    return np.concatenate([model.prior_sample(rng, 1) for rng in rngs], axis=0)


def _images(
    joint_states: np.ndarray,
    joint_valid: np.ndarray,
    scene: Scene,
    egos: Sequence[int],
    birdview: BirdviewConfig,
    threads: Optional[int],
    blank: bool = False,
) -> ad.Tensor:
    if blank:
        img = blank_birdview(birdview).pixels
        return ad.constant(np.broadcast_to(img, (len(egos),) + img.shape).copy())
    views = render_agents(
        joint_states, scene.attributes, joint_valid, scene.map, egos, birdview, threads=threads
    )
    return ad.constant(np.stack([v.pixels for v in views]))


def warmup(
    scene: Scene,
    model: CVRNNDriver,
    egos: Sequence[int],
    rngs: Sequence[np.random.Generator],
    birdview: Optional[BirdviewConfig] = None,
    params: Optional[Params] = None,
    threads: Optional[int] = None,
) -> AgentRuntimeState:
    """
    Seed the recurrent state of `egos` on the observed window.

    Each observed step is rendered from ground truth and folded into memory
    with the previous ground-truth action and a prior z. States are never
    overridden.

    Args:
        scene: Scene providing ground truth for steps 0..t_obs-1
        model: Driver model
        egos: Scene indices of the agents to warm up
        rngs: One generator per ego, in the same order
        birdview: Rendering config (default: model resolution and extent)
        params: Parameter view (default: model constants)
        threads: Rendering worker cap

    Returns:
        Runtime state after observing step t_obs-1

    Raises:
        EgoNotPresentError: If an ego lacks a ground-truth state in the window
    """
    if len(rngs) != len(egos):
        raise ShapeError(f"{len(egos)} egos but {len(rngs)} generators")
    p = params if params is not None else model.params.constants()
    bv = model.with_birdview(birdview or BirdviewConfig())
    states, valid = scene.states_array(), scene.valid_array()
    egos = list(egos)
    for i in egos:
        missing = np.flatnonzero(~valid[i, :scene.t_obs])
        if missing.size:
            raise EgoNotPresentError(
                f"agent {scene.agents[i].agent_id} has no ground-truth state "
                f"at step {int(missing[0])}"
            )

    l_r = scene.rear_axis_offsets()
    gt_actions = [
        ground_truth_actions(model.mode, states[i, :scene.t_obs], l_r[i], scene.dt) for i in egos
    ]
    runtime = model.initial_state(len(egos))
    for t in range(scene.t_obs):
        if t > 0:
            runtime.prev_action = ad.constant(np.stack([a[t - 1] for a in gt_actions]))
        images = _images(states[:, t], valid[:, t], scene, egos, bv, threads)
        runtime = model.observe(images, runtime, _prior(model, rngs), p)
    return runtime


def step_joint(
    scene: Scene,
    t: int,
    joint_states: np.ndarray,
    joint_valid: np.ndarray,
    egos: Sequence[int],
    runtime: AgentRuntimeState,
    model: CVRNNDriver,
    rngs: Sequence[np.random.Generator],
    mode: RolloutMode,
    birdview: BirdviewConfig,
    params: Params,
    config: Optional[RolloutConfig] = None,
    threads: Optional[int] = None,
    ground_truth: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> StepOutput:
    """
    Advance every ego from step t to t+1.

    Args:
        scene: Scene providing ground truth and the map
        t: Current step (the runtime has observed it)
        joint_states: (N, 4) states at t
        joint_valid: (N,) presence at t
        egos: Predicted agents; all must be present at t
        runtime: Memory with features and z for step t
        model: Driver model
        rngs: One generator per ego
        mode: Rollout mode
        birdview: Model-sized rendering config
        params: Parameter view
        config: Rollout config (noise, limits, classmates ego)
        threads: Rendering worker cap
        ground_truth: Precomputed (states_array, valid_array) of the scene

    Returns:
        Joint state and presence at t+1, the model's predictions for the egos,
        their actions and the runtime after observing t+1
    """
    config = config or RolloutConfig(mode=mode, ego_index=egos[0] if egos else 0)
    egos = list(egos)
    frozen = np.array(joint_states[egos], dtype=np.float64)
    action = model.act(runtime, params)
    l_r = scene.rear_axis_offsets()[egos]
    pred = model.step_states(ad.constant(frozen), action, l_r, scene.dt, config.limits).data.copy()
    if config.noise_on_states:
        sigma = np.asarray(model.obs_sigma)
        pred = pred + np.stack([sigma * rng.standard_normal(4) for rng in rngs])
        pred[:, 2] = wrap_angle_array(pred[:, 2])

    gt_states, gt_mask = ground_truth or (scene.states_array(), scene.valid_array())
    gt_next = gt_states[:, t + 1]
    gt_valid = gt_mask[:, t + 1]
    next_states = gt_next.copy()
    next_valid = gt_valid.copy()
    for n, i in enumerate(egos):
        pinned = mode == RolloutMode.TEACHER_FORCED or (
            mode == RolloutMode.CLASSMATES_FORCING and i != config.ego_index
        )
        if not (pinned and gt_valid[i]):
            next_states[i] = pred[n]
            next_valid[i] = True

    runtime = AgentRuntimeState(h=runtime.h, prev_action=action, feat=runtime.feat, z=runtime.z)
    if t + 1 < scene.horizon - 1:
        images = _images(
            next_states, next_valid, scene, egos, birdview, threads,
            blank=mode == RolloutMode.BLANK_FUTURE,
        )
        runtime = model.observe(images, runtime, _prior(model, rngs), params)
    return StepOutput(next_states, next_valid, pred, action.data.copy(), runtime)


def _sample(
    scene: Scene,
    model: CVRNNDriver,
    config: RolloutConfig,
    egos: List[int],
    k: int,
    birdview: BirdviewConfig,
    params: Params,
    threads: Optional[int],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    agent_ids = [scene.agents[i].agent_id for i in egos]
    rngs = agent_rngs(config.seed, k, agent_ids)
    S = scene.horizon - scene.t_obs
    states = np.zeros((len(egos), S, 4))
    actions = np.zeros((len(egos), S, model.action_dim))
    z = np.zeros((len(egos), S, model.config.latent_dim))

    runtime = warmup(scene, model, egos, rngs, birdview, params, threads)
    ground_truth = (scene.states_array(), scene.valid_array())
    t = scene.t_obs - 1
    joint_states, joint_valid = ground_truth[0][:, t], ground_truth[1][:, t]
    for s in range(S):
        z[:, s] = runtime.z.data
        out = step_joint(
            scene, t + s, joint_states, joint_valid, egos, runtime, model, rngs,
            config.mode, birdview, params, config, threads, ground_truth,
        )
        states[:, s], actions[:, s] = out.predicted, out.actions
        joint_states, joint_valid, runtime = out.joint_states, out.joint_valid, out.runtime
    return states, actions, z


def rollout(
    scene: Scene,
    model: CVRNNDriver,
    config: Optional[RolloutConfig] = None,
    birdview: Optional[BirdviewConfig] = None,
    logger: Optional[JsonLogger] = None,
) -> RolloutResult:
    """
    Sample K joint futures for a scene.

    Args:
        scene: Scene with at least t_obs observed steps
        model: Driver model (read only)
        config: Sampling settings
        birdview: Blend settings; resolution and extent come from the model
        logger: Optional logger

    Returns:
        RolloutResult over the agents present in the whole observed window
    """
    config = config or RolloutConfig()
    logger = logger or NullLogger()
    bv = model.with_birdview(birdview or BirdviewConfig())
    params = model.params.constants()
    egos = active_agents(scene)
    if config.mode == RolloutMode.CLASSMATES_FORCING and config.ego_index not in egos:
        raise EgoNotPresentError(f"ego {config.ego_index} is not present over the observed window")

    K = config.k_samples
    inner_threads = 1 if K > 1 else config.threads

    def one(k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _sample(scene, model, config, egos, k, bv, params, inner_threads)

    if not egos:
        samples = []
    elif K == 1 or config.threads == 1:
        samples = [one(k) for k in range(K)]
    else:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            samples = list(pool.map(one, range(K)))

    S = scene.horizon - scene.t_obs
    if egos:
        states, actions, zs = (np.stack([s[j] for s in samples]) for j in range(3))
    else:
        states = np.zeros((K, 0, S, 4))
        actions = np.zeros((K, 0, S, model.action_dim))
        zs = np.zeros((K, 0, S, model.config.latent_dim))
    result = RolloutResult(
        scene_id=scene.scene_id,
        agent_ids=[scene.agents[i].agent_id for i in egos],
        t_obs=scene.t_obs,
        horizon=scene.horizon,
        states=states,
        actions=actions,
        z=zs,
        mode=config.mode,
        seed=config.seed,
        model_checksum=model.params.checksum(),
    )
    logger.info(
        "ROLLOUT_COMPLETED",
        scene_id=scene.scene_id,
        agents=len(egos),
        k_samples=K,
        mode=config.mode.value,
    )
    return result


def rollout_many(
    scenes: Sequence[Scene],
    model: CVRNNDriver,
    config: Optional[RolloutConfig] = None,
    birdview: Optional[BirdviewConfig] = None,
    logger: Optional[JsonLogger] = None,
) -> List[RolloutResult]:
    """Roll out every scene; scenes are processed in order, samples in parallel"""
    return [rollout(scene, model, config, birdview, logger) for scene in scenes]


def evaluate_rollouts(
    scenes: Sequence[Scene],
    results: Sequence[RolloutResult],
    k: Optional[int] = None,
    variant: str = "rms",
) -> MetricReport:
    """
    Best-of-K metrics for rollouts against the scenes they came from.

    Args:
        scenes: Ground-truth scenes
        results: Rollouts, matched to scenes by scene_id
        k: Number of samples to use (default: all)
        variant: ADE variant

    Raises:
        KeyError: If a result has no matching scene
    """
    by_id = {s.scene_id: s for s in scenes}
    rows = []
    used_k = k
    for result in results:
        if result.scene_id not in by_id:
            raise KeyError(f"no scene {result.scene_id!r} for rollout result")
        scene = by_id[result.scene_id]
        if not result.agent_ids:
            continue
        kk = result.k_samples if k is None else min(k, result.k_samples)
        used_k = kk if used_k is None else used_k
        idx = [scene.index_of(a) for a in result.agent_ids]
        gt = scene.states_array()[idx, scene.t_obs:, :2]
        mask = scene.valid_array()[idx, scene.t_obs:]
        rows.extend(evaluate_scene(
            scene.scene_id, result.agent_ids, result.positions()[:kk], gt, mask, variant
        ))
    return build_report(rows, used_k or 0, variant)
