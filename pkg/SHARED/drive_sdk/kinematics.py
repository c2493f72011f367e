"""
Differentiable state-transition models.

The tensor functions (`*_t`) operate on batched states shaped (..., 4) ordered
(x, y, psi, v) and actions shaped (..., action_dim); they are what the driver
model and the gradient checks use. The `AgentState`-level functions wrap them
for single agents. The bicycle model commands the slip angle directly
(l_f = 0) and applies the speed update before the pose update.
"""

import math
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError
from .geometry import wrap_angle_array
from .models import (
    AgentState,
    BicycleAction,
    DisplacementAction,
    KinematicMode,
    UnconstrainedAction,
)

Scalar = Union[float, np.ndarray, Tensor]

_ACTION_DIMS = {
    KinematicMode.BICYCLE: 2,
    KinematicMode.UNCONSTRAINED: 4,
    KinematicMode.DISPLACEMENT: 2,
    KinematicMode.ORIENTED_UNCONSTRAINED: 4,
    KinematicMode.ORIENTED_DISPLACEMENT: 2,
}


class ActionLimits(BaseModel):
    """Optional clamp on bicycle actions; None disables a bound"""
    max_abs_alpha: Optional[float] = Field(default=None, gt=0)
    max_abs_beta: Optional[float] = Field(default=None, gt=0)

    def apply(self, action: Tensor) -> Tensor:
        alpha, beta = action[..., 0], action[..., 1]
        if self.max_abs_alpha is not None:
            alpha = ad.clip(alpha, -self.max_abs_alpha, self.max_abs_alpha)
        if self.max_abs_beta is not None:
            beta = ad.clip(beta, -self.max_abs_beta, self.max_abs_beta)
        return ad.stack([alpha, beta], axis=-1)


def action_dim(mode: KinematicMode) -> int:
    """Number of action components for a kinematic mode"""
    return _ACTION_DIMS[KinematicMode(mode)]


def _check_step_params(l_r: Scalar, dt: float) -> None:
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    lr = l_r.data if isinstance(l_r, Tensor) else np.asarray(l_r)
    if np.any(lr <= 0):
        raise DomainError("rear axis offset l_r must be positive")


def _check_dims(state: Tensor, action: Tensor, dim: int) -> None:
    if state.shape[-1] != 4:
        raise ShapeError(f"state must have 4 components, got shape {state.shape}")
    if action.shape[-1] != dim:
        raise ShapeError(f"action must have {dim} components, got shape {action.shape}")


# Tensor-level steps
def bicycle_step_t(
    state: Tensor,
    action: Tensor,
    l_r: Scalar,
    dt: float,
    limits: Optional[ActionLimits] = None,
) -> Tensor:
    """Discrete kinematic bicycle update for batched states and (alpha, beta) actions"""
    state, action = ad.as_tensor(state), ad.as_tensor(action)
    _check_dims(state, action, 2)
    _check_step_params(l_r, dt)
    if limits is not None:
        action = limits.apply(action)
    x, y, psi, v = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    alpha, beta = action[..., 0], action[..., 1]

    v_next = v + alpha * dt
    heading = psi + beta
    x_next = x + v_next * ad.cos(heading) * dt
    y_next = y + v_next * ad.sin(heading) * dt
    psi_next = ad.wrap_angle(psi + v_next / l_r * ad.sin(beta) * dt)
    return ad.stack([x_next, y_next, psi_next, v_next], axis=-1)


def displacement_to_bicycle_t(state: Tensor, displacement: Tensor, dt: float) -> Tensor:
    """
    Bicycle action that moves a state by exactly (dx, dy) in one step.

    A zero displacement maps to beta = 0 so the gradient path stays finite.
    """
    x_psi, v = state[..., 2], state[..., 3]
    dx, dy = displacement[..., 0], displacement[..., 1]
    dist2 = dx * dx + dy * dy
    zero = dist2.data == 0
    dist = ad.where(zero, 0.0, ad.sqrt(ad.where(zero, 1.0, dist2)))
    alpha = (dist / dt - v) / dt
    direction = ad.atan2(ad.where(zero, 0.0, dy), ad.where(zero, 1.0, dx))
    beta = ad.where(zero, 0.0, ad.wrap_angle(direction - x_psi))
    return ad.stack([alpha, beta], axis=-1)


def displacement_step_t(
    state: Tensor,
    action: Tensor,
    l_r: Scalar,
    dt: float,
    limits: Optional[ActionLimits] = None,
) -> Tensor:
    state, action = ad.as_tensor(state), ad.as_tensor(action)
    _check_dims(state, action, 2)
    _check_step_params(l_r, dt)
    return bicycle_step_t(state, displacement_to_bicycle_t(state, action, dt), l_r, dt, limits)


def unconstrained_step_t(state: Tensor, action: Tensor) -> Tensor:
    """Componentwise state delta with the heading re-wrapped"""
    state, action = ad.as_tensor(state), ad.as_tensor(action)
    _check_dims(state, action, 4)
    moved = state + action
    return ad.stack(
        [moved[..., 0], moved[..., 1], ad.wrap_angle(moved[..., 2]), moved[..., 3]],
        axis=-1,
    )


def rotate_to_world_t(state: Tensor, action: Tensor) -> Tensor:
    """Rotate the (dx, dy) part of an ego-axis action by the current heading"""
    psi = state[..., 2]
    c, s = ad.cos(psi), ad.sin(psi)
    dx, dy = action[..., 0], action[..., 1]
    parts = [c * dx - s * dy, s * dx + c * dy]
    parts += [action[..., i] for i in range(2, action.shape[-1])]
    return ad.stack(parts, axis=-1)


def kinematic_step(
    mode: KinematicMode,
    state: Tensor,
    action: Tensor,
    l_r: Scalar,
    dt: float,
    limits: Optional[ActionLimits] = None,
) -> Tensor:
    """
    Apply one step of the given kinematic model.

    Args:
        mode: Action space / transition model
        state: (..., 4) states
        action: (..., action_dim(mode)) actions
        l_r: Rear axis offsets broadcastable to the batch shape
        dt: Step length in seconds
        limits: Optional clamp applied to bicycle actions

    Returns:
        (..., 4) next states
    """
    mode = KinematicMode(mode)
    state, action = ad.as_tensor(state), ad.as_tensor(action)
    if mode in (KinematicMode.ORIENTED_UNCONSTRAINED, KinematicMode.ORIENTED_DISPLACEMENT):
        _check_dims(state, action, action_dim(mode))
        action = rotate_to_world_t(state, action)
    if mode == KinematicMode.BICYCLE:
        return bicycle_step_t(state, action, l_r, dt, limits)
    if mode in (KinematicMode.DISPLACEMENT, KinematicMode.ORIENTED_DISPLACEMENT):
        return displacement_step_t(state, action, l_r, dt, limits)
    return unconstrained_step_t(state, action)


# AgentState-level steps
def _state_tensor(s: AgentState) -> Tensor:
    return ad.constant(s.as_array())


def bicycle_step(s: AgentState, a: BicycleAction, l_r: float, dt: float) -> AgentState:
    """
    One discrete bicycle step.

    Raises:
        DomainError: If dt or l_r is not positive
    """
    out = bicycle_step_t(_state_tensor(s), ad.constant(a.as_array()), l_r, dt)
    return AgentState.from_array(out.data)


def unconstrained_step(s: AgentState, a: UnconstrainedAction) -> AgentState:
    out = unconstrained_step_t(_state_tensor(s), ad.constant(a.as_array()))
    return AgentState.from_array(out.data)


def displacement_step(s: AgentState, a: DisplacementAction, l_r: float, dt: float) -> AgentState:
    out = displacement_step_t(_state_tensor(s), ad.constant(a.as_array()), l_r, dt)
    return AgentState.from_array(out.data)


def oriented_step(
    s: AgentState,
    a: Union[UnconstrainedAction, DisplacementAction],
    mode: KinematicMode,
    l_r: float = 1.0,
    dt: float = 0.1,
) -> AgentState:
    """Step with an action expressed in the agent's own axes"""
    mode = KinematicMode(mode)
    if mode not in (KinematicMode.ORIENTED_UNCONSTRAINED, KinematicMode.ORIENTED_DISPLACEMENT):
        raise ValueError(f"oriented_step needs an oriented mode, got {mode.value}")
    out = kinematic_step(mode, _state_tensor(s), ad.constant(a.as_array()), l_r, dt)
    return AgentState.from_array(out.data)


def bicycle_continuous_derivative(
    s: AgentState, a: BicycleAction, l_r: float
) -> Tuple[float, float, float, float]:
    """Continuous-time bicycle dynamics as (v_dot, x_dot, y_dot, psi_dot)"""
    if not l_r > 0:
        raise DomainError("rear axis offset l_r must be positive")
    heading = s.psi + a.beta
    return (
        a.alpha,
        s.v * math.cos(heading),
        s.v * math.sin(heading),
        s.v / l_r * math.sin(a.beta),
    )


# Ground-truth action extraction (numpy, batched over l_r candidates)
def bicycle_step_array(
    state: np.ndarray, alpha: np.ndarray, beta: np.ndarray, l_r: np.ndarray, dt: float
) -> np.ndarray:
    """Plain numpy bicycle step over a batch of states"""
    v_next = state[..., 3] + alpha * dt
    heading = state[..., 2] + beta
    x_next = state[..., 0] + v_next * np.cos(heading) * dt
    y_next = state[..., 1] + v_next * np.sin(heading) * dt
    psi_next = wrap_angle_array(state[..., 2] + v_next / l_r * np.sin(beta) * dt)
    return np.stack([x_next, y_next, psi_next, v_next], axis=-1)


def recover_bicycle_actions_array(
    positions: np.ndarray,
    initial_state: np.ndarray,
    l_r: np.ndarray,
    dt: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Recover bicycle actions that reproduce a position sequence.

    The right-hand side uses the replayed state of the previous step, so the
    replay lands on every recorded position by construction.

    Args:
        positions: (T, 2) recorded positions
        initial_state: (4,) seed state
        l_r: (B,) candidate rear axis offsets
        dt: Step length

    Returns:
        actions (B, T-1, 2) and replayed states (B, T, 4)
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    l_r = np.atleast_1d(np.asarray(l_r, dtype=np.float64))
    if np.any(l_r <= 0):
        raise DomainError("rear axis offset l_r must be positive")
    pos = np.asarray(positions, dtype=np.float64)
    T, B = len(pos), len(l_r)
    replayed = np.empty((B, T, 4))
    actions = np.empty((B, max(T - 1, 0), 2))
    state = np.broadcast_to(np.asarray(initial_state, dtype=np.float64), (B, 4)).copy()
    replayed[:, 0] = state
    for t in range(1, T):
        dx = pos[t, 0] - state[:, 0]
        dy = pos[t, 1] - state[:, 1]
        dist = np.hypot(dx, dy)
        alpha = (dist / dt - state[:, 3]) / dt
        zero = dist == 0
        beta = np.where(zero, 0.0, wrap_angle_array(np.arctan2(dy, dx) - state[:, 2]))
        actions[:, t - 1, 0] = alpha
        actions[:, t - 1, 1] = beta
        state = bicycle_step_array(state, alpha, beta, l_r, dt)
        replayed[:, t] = state
    return actions, replayed


def ground_truth_actions(
    mode: KinematicMode,
    states: np.ndarray,
    l_r: float,
    dt: float,
) -> np.ndarray:
    """
    Express a recorded state sequence in a mode's action space.

    Args:
        mode: Target action space
        states: (T, 4) recorded states
        l_r: Rear axis offset (bicycle and displacement modes)
        dt: Step length

    Returns:
        (T-1, action_dim(mode)) actions; action t moves state t to state t+1
    """
    mode = KinematicMode(mode)
    s = np.asarray(states, dtype=np.float64)
    if mode == KinematicMode.BICYCLE:
        actions, _ = recover_bicycle_actions_array(s[:, :2], s[0], np.array([l_r]), dt)
        return actions[0]
    delta = s[1:] - s[:-1]
    delta[:, 2] = wrap_angle_array(delta[:, 2])
    if mode in (KinematicMode.DISPLACEMENT, KinematicMode.ORIENTED_DISPLACEMENT):
        delta = delta[:, :2]
    if mode in (KinematicMode.ORIENTED_UNCONSTRAINED, KinematicMode.ORIENTED_DISPLACEMENT):
        psi = s[:-1, 2]
        c, sn = np.cos(psi), np.sin(psi)
        dx, dy = delta[:, 0].copy(), delta[:, 1].copy()
        delta[:, 0] = c * dx + sn * dy
        delta[:, 1] = -sn * dx + c * dy
    return delta
