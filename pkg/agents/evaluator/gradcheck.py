"""
Finite-difference verification of the differentiable components.

Each suite draws random points from a seeded generator, builds a scalar
function of a small input vector and compares reverse-mode gradients with
central differences via `autodiff.grad_check`.
"""

import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.autodiff import Tensor
from SHARED.drive_sdk.config_loader import AgentModelConfig, BirdviewConfig
from SHARED.drive_sdk.kinematics import action_dim, kinematic_step
from SHARED.drive_sdk.logger import JsonLogger, NullLogger
from SHARED.drive_sdk.models import KinematicMode

from agents.driver.model import CVRNNDriver
from agents.renderer.primitives import LAYERS, PALETTE, ConvexPolygon, DrawPrimitive, OrientedBox
from agents.renderer.rasterizer import rasterize_soft

SUITE_TOLERANCES: Dict[str, float] = {
    "kinematics": 1e-6,
    "rasterizer": 1e-3,
    "agent": 1e-3,
}

# Small enough that one suite point runs in well under a second.
TINY_AGENT = AgentModelConfig(
    hidden_dim=4,
    num_layers=2,
    latent_dim=2,
    birdview_resolution=16,
    extent_m=20.0,
    encoder_channels=[2, 2],
    feature_dim=4,
    mlp_dim=4,
    obs_sigma=0.5,
)

Point = Tuple[Callable[[Tensor], Tensor], np.ndarray, str]


class SuiteResult(BaseModel):
    """Outcome of one gradient-check suite"""
    suite: str
    points: int
    max_error: float
    tolerance: float
    passed: bool
    worst_point: str = ""


def _weights(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


# Kinematics
def _kinematics_action(rng: np.random.Generator, mode: KinematicMode) -> np.ndarray:
    if mode == KinematicMode.BICYCLE:
        return np.array([rng.uniform(-3.0, 3.0), rng.uniform(-0.99, 0.99)])
    if mode in (KinematicMode.DISPLACEMENT, KinematicMode.ORIENTED_DISPLACEMENT):
        r, th = rng.uniform(0.1, 1.5), rng.uniform(-1.0, 1.0)
        return np.array([r * math.cos(th), r * math.sin(th)])
    return np.concatenate([
        rng.uniform(-1.0, 1.0, 2), rng.uniform(-0.3, 0.3, 1), rng.uniform(-1.0, 1.0, 1)
    ])


def kinematics_point(rng: np.random.Generator, index: int, dt: float = 0.1) -> Point:
    """Weighted next state as a function of (state, action, l_r), cycling through modes"""
    modes = list(KinematicMode)
    mode = modes[index % len(modes)]
    state = np.array([
        rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-0.99, 0.99), rng.uniform(0.5, 10.0)
    ])
    action = _kinematics_action(rng, mode)
    l_r = rng.uniform(0.5, 2.0)
    w = _weights(rng, 4)
    A = action_dim(mode)

    def f(x: Tensor) -> Tensor:
        nxt = kinematic_step(mode, x[:4], x[4:4 + A], x[4 + A], dt)
        return (nxt * w).sum()

    return f, np.concatenate([state, action, [l_r]]), f"{mode.value}#{index}"


# Rasterizer
def rasterizer_point(
    rng: np.random.Generator, index: int, config: Optional[BirdviewConfig] = None
) -> Point:
    """Weighted soft image as a function of a box pose (center and angle) over a road polygon"""
    config = config or BirdviewConfig(resolution_px=32, extent_m=20.0)
    w = _weights(rng, (3, config.resolution_px, config.resolution_px))
    half = rng.uniform(3.0, 8.0)
    road = ConvexPolygon(ad.constant([[-half, -4.0], [half, -4.0], [half, 4.0], [-half, 4.0]]))
    length, width = rng.uniform(2.0, 5.0), rng.uniform(1.0, 2.5)
    pose = np.array([
        rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-math.pi, math.pi)
    ])

    def f(x: Tensor) -> Tensor:
        prims = [
            DrawPrimitive(road, PALETTE["driveable"], LAYERS["driveable"]),
            DrawPrimitive(
                OrientedBox(x[:2], length, width, x[2]), PALETTE["agent"], LAYERS["agent"]
            ),
        ]
        return (rasterize_soft(prims, config).image * w).mean()

    return f, pose, f"box#{index}"


# Driver model
def _inject(base: np.ndarray, flat_index: np.ndarray, x: Tensor) -> Tensor:
    """base with the entries at flat_index replaced by x (differentiable in x)"""
    held = base.reshape(-1).copy()
    held[flat_index] = 0.0
    scatter = np.zeros((base.size, len(flat_index)))
    scatter[flat_index, np.arange(len(flat_index))] = 1.0
    spread = ad.matmul(scatter, x.reshape(len(flat_index), 1)).reshape(-1)
    return (spread + held).reshape(base.shape)


def agent_point(
    rng: np.random.Generator,
    index: int,
    model: Optional[CVRNNDriver] = None,
    entries: int = 6,
    dt: float = 0.1,
) -> Point:
    """
    One ELBO step with frozen noise as a function of a few entries of one parameter.

    Parameter names are visited in order so every group is covered.
    """
    model = model or CVRNNDriver(TINY_AGENT)
    cfg = model.config
    names = model.params.names()
    name = names[index % len(names)]
    base = model.params[name]
    flat_index = rng.choice(base.size, size=min(entries, base.size), replace=False)
    consts = model.params.constants()

    N, R, A = 2, cfg.birdview_resolution, model.action_dim
    images = ad.constant(rng.uniform(0.0, 1.0, (N, 3, R, R)))
    s_cur = np.column_stack([
        rng.uniform(-5, 5, N),
        rng.uniform(-5, 5, N),
        rng.uniform(-0.9, 0.9, N),
        rng.uniform(0.5, 10.0, N),
    ])
    s_next = s_cur + rng.normal(0.0, 0.2, s_cur.shape)
    a_gt = rng.normal(0.0, 0.5, (N, A))
    eps = rng.standard_normal((N, cfg.latent_dim))
    l_r = rng.uniform(0.5, 2.0, N)
    runtime = model.initial_state(N)
    runtime.prev_action = ad.constant(rng.normal(0.0, 0.5, (N, A)))
    runtime.h = [ad.constant(rng.uniform(-0.5, 0.5, h.shape)) for h in runtime.h]

    def f(x: Tensor) -> Tensor:
        p = dict(consts)
        p[name] = _inject(base, flat_index, x)
        term, _, _, _ = model.elbo_step(
            s_next, ad.constant(s_cur), images, runtime, a_gt, p, eps, l_r, dt
        )
        return term.sum()

    return f, base.reshape(-1)[flat_index].copy(), f"{name}#{index}"


SUITES: Dict[str, Callable[[np.random.Generator, int], Point]] = {
    "kinematics": kinematics_point,
    "rasterizer": rasterizer_point,
    "agent": agent_point,
}


def run_suite(
    suite: str,
    points: int = 100,
    seed: int = 0,
    eps: float = 1e-6,
    logger: Optional[JsonLogger] = None,
) -> SuiteResult:
    """
    Run one suite.

    Args:
        suite: "kinematics", "rasterizer" or "agent"
        points: Number of random points
        seed: Generator seed
        eps: Finite-difference step
        logger: Optional logger

    Returns:
        SuiteResult; passed iff max_error < tolerance
    """
    if suite not in SUITES:
        raise ValueError(f"unknown gradcheck suite {suite!r}; choose from {sorted(SUITES)}")
    if points < 1:
        raise ValueError("points must be at least 1")
    logger = logger or NullLogger()
    rng = np.random.default_rng(np.random.SeedSequence([seed, list(SUITES).index(suite)]))
    worst, worst_label = 0.0, ""
    for i in range(points):
        f, x, label = SUITES[suite](rng, i)
        err = ad.grad_check(f, x, eps=eps)
        logger.debug("GRADCHECK_POINT", suite=suite, point=label, error=err)
        if err >= worst:
            worst, worst_label = err, label
    tol = SUITE_TOLERANCES[suite]
    result = SuiteResult(
        suite=suite,
        points=points,
        max_error=worst,
        tolerance=tol,
        passed=worst < tol,
        worst_point=worst_label,
    )
    logger.info("GRADCHECK_COMPLETED", **result.model_dump())
    return result


def run_suites(
    names: List[str], points: int = 100, seed: int = 0, logger: Optional[JsonLogger] = None
) -> List[SuiteResult]:
    """Run several suites; "all" expands to every suite"""
    if "all" in names:
        names = list(SUITES)
    return [run_suite(n, points, seed, logger=logger) for n in names]
