"""
Trajectory prediction metrics.

ADE is the root of the mean squared displacement over the predicted horizon;
the mean-of-distances form is available as variant="mean". Best-of-K minimizes
ADE and FDE independently, per agent, before averaging over agents. MFD is the
largest final-position distance between any two of the K samples.
"""

from typing import Callable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from SHARED.drive_sdk.errors import ShapeError

ADE_VARIANTS = ("rms", "mean")


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[-1] != 2:
        raise ShapeError(f"pred and gt must both be (S, 2), got {p.shape} and {g.shape}")
    return p, g


def ade(pred, gt, mask: Optional[Sequence[bool]] = None, variant: str = "rms") -> float:
    """
    Average displacement error over the predicted steps.

    Args:
        pred: (S, 2) predicted positions for t = T_obs+1..T
        gt: (S, 2) ground-truth positions
        mask: Optional (S,) validity; masked steps are ignored
        variant: "rms" (root of mean squared distance) or "mean" (mean distance)

    Raises:
        ShapeError: On shape mismatch
        ValueError: If no step is left to average
    """
    if variant not in ADE_VARIANTS:
        raise ValueError(f"unknown ADE variant {variant!r}")
    p, g = _pair(pred, gt)
    d2 = np.sum((p - g) ** 2, axis=-1)
    if mask is not None:
        d2 = d2[np.asarray(mask, dtype=bool)]
    if d2.size == 0:
        raise ValueError("ADE needs at least one predicted step")
    if variant == "rms":
        return float(np.sqrt(np.mean(d2)))
    return float(np.mean(np.sqrt(d2)))


def fde(pred, gt) -> float:
    """Euclidean distance at the final step"""
    p, g = _pair(pred, gt)
    if len(p) == 0:
        raise ValueError("FDE needs at least one predicted step")
    return float(np.hypot(*(p[-1] - g[-1])))


def min_over_k(metric: Callable[..., float], samples, gt, **kwargs) -> float:
    """Smallest metric value over K samples for one agent"""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or len(samples) < 1:
        raise ShapeError(f"samples must be (K, S, 2) with K >= 1, got {samples.shape}")
    return min(metric(s, gt, **kwargs) for s in samples)


def mfd(samples) -> float:
    """Maximum pairwise distance between the final positions of K samples (0 for K = 1)"""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3:
        raise ShapeError(f"samples must be (K, S, 2), got {samples.shape}")
    final = samples[:, -1, :]
    diff = final[:, None, :] - final[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff ** 2, axis=-1))))


# Reports
class AgentMetrics(BaseModel):
    """Best-of-K metrics for one agent"""
    scene_id: str
    agent_id: int
    min_ade: Optional[float] = Field(default=None, ge=0)
    min_fde: Optional[float] = Field(default=None, ge=0)
    mfd: Optional[float] = Field(default=None, ge=0)


class SceneMetrics(BaseModel):
    """Agent-averaged metrics for one scene"""
    scene_id: str
    k: int
    num_agents: int
    min_ade_k: Optional[float] = Field(default=None, ge=0)
    min_fde_k: Optional[float] = Field(default=None, ge=0)
    mfd_k: Optional[float] = Field(default=None, ge=0)


class MetricReport(BaseModel):
    """Per-scene rows, per-agent breakdown and the aggregate over all agents"""
    k: int
    variant: str = "rms"
    min_ade_k: Optional[float] = Field(default=None, ge=0)
    min_fde_k: Optional[float] = Field(default=None, ge=0)
    mfd_k: Optional[float] = Field(default=None, ge=0)
    scenes: List[SceneMetrics] = Field(default_factory=list)
    agents: List[AgentMetrics] = Field(default_factory=list)


def _mean(values: List[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_agent(
    scene_id: str,
    agent_id: int,
    samples,
    gt,
    mask: Optional[Sequence[bool]] = None,
    variant: str = "rms",
) -> AgentMetrics:
    """
    Best-of-K metrics for one agent.

    ADE uses masked steps only; FDE and MFD are skipped if the final step is masked.
    """
    samples = np.asarray(samples, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = np.ones(len(gt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    result = AgentMetrics(scene_id=scene_id, agent_id=agent_id)
    if m.any():
        result.min_ade = min_over_k(ade, samples, gt, mask=m, variant=variant)
    if m[-1]:
        result.min_fde = min_over_k(fde, samples, gt)
        result.mfd = mfd(samples)
    return result


def evaluate_scene(
    scene_id: str,
    agent_ids: Sequence[int],
    samples,
    gt,
    mask=None,
    variant: str = "rms",
) -> List[AgentMetrics]:
    """
    Metrics for every agent of a scene.

    Args:
        samples: (K, N, S, 2) predicted positions
        gt: (N, S, 2) ground truth
        mask: Optional (N, S) validity
    """
    samples = np.asarray(samples, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if samples.ndim != 4 or samples.shape[1:] != gt.shape:
        raise ShapeError(f"samples {samples.shape} do not match gt {gt.shape}")
    return [
        evaluate_agent(
            scene_id,
            int(agent_ids[n]),
            samples[:, n],
            gt[n],
            None if mask is None else np.asarray(mask)[n],
            variant,
        )
        for n in range(gt.shape[0])
    ]


def build_report(per_agent: Sequence[AgentMetrics], k: int, variant: str = "rms") -> MetricReport:
    """Aggregate agent rows into scene rows and an overall mean over agents"""
    scenes: List[SceneMetrics] = []
    for scene_id in dict.fromkeys(a.scene_id for a in per_agent):
        rows = [a for a in per_agent if a.scene_id == scene_id]
        scenes.append(SceneMetrics(
            scene_id=scene_id,
            k=k,
            num_agents=len(rows),
            min_ade_k=_mean([a.min_ade for a in rows]),
            min_fde_k=_mean([a.min_fde for a in rows]),
            mfd_k=_mean([a.mfd for a in rows]),
        ))
    return MetricReport(
        k=k,
        variant=variant,
        min_ade_k=_mean([a.min_ade for a in per_agent]),
        min_fde_k=_mean([a.min_fde for a in per_agent]),
        mfd_k=_mean([a.mfd for a in per_agent]),
        scenes=scenes,
        agents=list(per_agent),
    )
