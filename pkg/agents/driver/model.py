"""
Conditional variational recurrent driver model.

Per agent and step t:
    f_t   = encoder(birdview_t)
    z_t   ~ N(0, I) (generation) or q(z | a_t, f_t, h_{t-1}) (training)
    h_t   = GRU(h_{t-1}, [f_t, z_t, a_{t-1}])
    a_t   = decoder(f_t, z_t, h_t)
    s_t+1 = kinematics(s_t, a_t)

All operations are batched over a leading agent dimension N.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.autodiff import Tensor
from SHARED.drive_sdk.config_loader import AgentModelConfig, BirdviewConfig
from SHARED.drive_sdk.errors import CheckpointError, DomainError, ShapeError
from SHARED.drive_sdk.kinematics import ActionLimits, action_dim, kinematic_step
from SHARED.drive_sdk.models import KinematicMode
from SHARED.drive_sdk.repositories import CheckpointRepository

from .networks import Params, ParameterStore, conv_encoder, init_driver_parameters, mlp, stacked_gru

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian, batched (N, D)"""
    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ShapeError(f"mean {self.mean.shape} and std {self.std.shape} differ")
        if np.any(self.std.data <= 0):
            raise DomainError("Gaussian std must be positive")

    def sample(self, eps: np.ndarray) -> Tensor:
        """Reparameterized draw mean + std * eps"""
        return self.mean + self.std * eps


@dataclass
class AgentRuntimeState:
    """
    Recurrent memory for a batch of agents.

    h holds one (N, hidden_dim) tensor per GRU layer. `feat`, `z` and
    `prev_action` are what the next decode / update needs.
    """
    h: List[Tensor]
    prev_action: Tensor
    feat: Optional[Tensor] = None
    z: Optional[Tensor] = None

    @property
    def top(self) -> Tensor:
        return self.h[-1]

    def rows(self, index: Sequence[int]) -> "AgentRuntimeState":
        idx = np.asarray(index, dtype=int)

        def pick(t: Optional[Tensor]) -> Optional[Tensor]:
            return None if t is None else t[idx]

        return AgentRuntimeState(
            h=[h[idx] for h in self.h],
            prev_action=self.prev_action[idx],
            feat=pick(self.feat),
            z=pick(self.z),
        )


def kl_gaussian(q: GaussianParams) -> Tensor:
    """KL(q || N(0, I)) per row: sum_d 0.5 (mu^2 + sigma^2 - 1 - 2 ln sigma)"""
    mu, sigma = q.mean, q.std
    terms = 0.5 * (mu * mu + sigma * sigma - 1.0) - ad.log(sigma)
    return terms.sum(axis=-1)


def state_log_likelihood(pred: Tensor, target, sigma: Sequence[float]) -> Tensor:
    """
    Per-row log N(target | pred, diag(sigma^2)) over (x, y, psi, v).

    The heading residual is wrapped to (-pi, pi] before it is scored.
    """
    pred = ad.as_tensor(pred)
    resid = ad.sub(target, pred)
    resid = ad.stack(
        [resid[..., 0], resid[..., 1], ad.wrap_angle(resid[..., 2]), resid[..., 3]],
        axis=-1,
    )
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.shape != (4,) or np.any(sig <= 0):
        raise DomainError("observation sigma must be 4 positive values")
    z = resid / sig
    const = float(np.sum(np.log(sig)) + 2.0 * LOG_2PI)
    return -0.5 * ad.square(z).sum(axis=-1) - const


class CVRNNDriver:
    """
    Driver policy: birdview encoder, 2-layer GRU, Gaussian latent and action decoder.

    The model object holds configuration and parameters; every forward method
    takes the parameter view to use (`bind`/`constants` of the store).
    """

    def __init__(self, config: AgentModelConfig, params: Optional[ParameterStore] = None):
        """
        Initialize driver model.

        Args:
            config: Architecture and likelihood configuration
            params: Existing parameters (default: seeded initialization)
        """
        self.config = config
        self.params = params if params is not None else init_driver_parameters(config)
        self.mode = KinematicMode(config.kinematic_mode)
        self.action_dim = action_dim(self.mode)
        self.obs_sigma = config.obs_sigma_vector

    @property
    def birdview_config(self) -> BirdviewConfig:
        return BirdviewConfig(
            resolution_px=self.config.birdview_resolution, extent_m=self.config.extent_m
        )

    def with_birdview(self, base: BirdviewConfig) -> BirdviewConfig:
        """Rendering config for this model: blend settings from base, size from the model"""
        return base.model_copy(update={
            "resolution_px": self.config.birdview_resolution,
            "extent_m": self.config.extent_m,
        })

    # Components
    def initial_state(self, n: int) -> AgentRuntimeState:
        H, dtype = self.config.hidden_dim, self.params.dtype
        return AgentRuntimeState(
            h=[ad.constant(np.zeros((n, H), dtype=dtype)) for _ in range(self.config.num_layers)],
            prev_action=ad.constant(np.zeros((n, self.action_dim), dtype=dtype)),
        )

    def encode_birdview(self, images: Tensor, p: Params) -> Tensor:
        """(N, 3, R, R) images to (N, feature_dim) features"""
        return conv_encoder(ad.as_tensor(images), p, self.config)

    def posterior(self, a_gt: Tensor, feat: Tensor, h_top: Tensor, p: Params) -> GaussianParams:
        """q(z | a, b, h): diagonal Gaussian with std = exp(raw)"""
        out = mlp(ad.concat([ad.as_tensor(a_gt), feat, h_top], axis=-1), p, "post")
        Z = self.config.latent_dim
        return GaussianParams(mean=out[:, :Z], std=ad.exp(out[:, Z:]))

    def decode_action(self, feat: Tensor, z: Tensor, h_top: Tensor, p: Params) -> Tensor:
        """Deterministic action; the bicycle slip angle is squashed to (-pi, pi)"""
        raw = mlp(ad.concat([feat, ad.as_tensor(z), h_top], axis=-1), p, "dec")
        if self.mode == KinematicMode.BICYCLE:
            return ad.stack([raw[:, 0], math.pi * ad.tanh(raw[:, 1])], axis=-1)
        return raw

    def recurrent_update(
        self, h: List[Tensor], feat: Tensor, z: Tensor, action: Tensor, p: Params
    ) -> List[Tensor]:
        """GRU update on [features, z, executed action]"""
        x = ad.concat([feat, ad.as_tensor(z), ad.as_tensor(action)], axis=-1)
        return stacked_gru(x, h, p)

    def prior_sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """(n, latent_dim) draws from N(0, I)"""
        return rng.standard_normal((n, self.config.latent_dim))

    def step_states(self, states: Tensor, action: Tensor, l_r, dt: float,
                    limits: Optional[ActionLimits] = None) -> Tensor:
        return kinematic_step(self.mode, states, action, l_r, dt, limits)

    # Objective
    def elbo_step(
        self,
        s_next_gt,
        s_cur: Tensor,
        images: Tensor,
        runtime: AgentRuntimeState,
        a_gt,
        p: Params,
        eps: np.ndarray,
        l_r,
        dt: float,
    ) -> Tuple[Tensor, AgentRuntimeState, Tensor, Tensor]:
        """
        Single-sample ELBO term for one step.

        Args:
            s_next_gt: (N, 4) ground-truth next states
            s_cur: (N, 4) states the action is applied to
            images: (N, 3, R, R) birdviews at the current step
            runtime: Memory before this step; prev_action is the last executed action
            a_gt: (N, A) ground-truth actions for the posterior
            p: Bound parameters
            eps: (N, latent_dim) standard normal noise for reparameterization
            l_r: Rear axis offsets, (N,)
            dt: Step length

        Returns:
            (per-agent term recon - KL, updated runtime, z, predicted next state)
        """
        feat = self.encode_birdview(images, p)
        q = self.posterior(a_gt, feat, runtime.top, p)
        z = q.sample(eps)
        h = self.recurrent_update(runtime.h, feat, z, runtime.prev_action, p)
        action = self.decode_action(feat, z, h[-1], p)
        pred = self.step_states(s_cur, action, l_r, dt)
        recon = state_log_likelihood(pred, s_next_gt, self.obs_sigma)
        term = recon - kl_gaussian(q)
        return term, AgentRuntimeState(h=h, prev_action=action, feat=feat, z=z), z, pred

    def observe(
        self,
        images: Tensor,
        runtime: AgentRuntimeState,
        z: Tensor,
        p: Params,
    ) -> AgentRuntimeState:
        """Encode the current birdviews and fold them into memory with a given z"""
        feat = self.encode_birdview(images, p)
        h = self.recurrent_update(runtime.h, feat, z, runtime.prev_action, p)
        return AgentRuntimeState(h=h, prev_action=runtime.prev_action, feat=feat, z=ad.as_tensor(z))

    def act(self, runtime: AgentRuntimeState, p: Params) -> Tensor:
        """Decode the action for the step last observed"""
        if runtime.feat is None or runtime.z is None:
            raise ValueError("act() needs an observed step")
        return self.decode_action(runtime.feat, runtime.z, runtime.top, p)


# Checkpoints
def save_checkpoint(model: CVRNNDriver, path) -> str:
    """Write config and parameters; returns the parameter checksum"""
    config = model.config.model_dump(mode="json")
    return CheckpointRepository().save(path, config, model.params.arrays())


def load_checkpoint(path) -> CVRNNDriver:
    """
    Rebuild a driver from a checkpoint.

    Raises:
        CheckpointError: On an unreadable file, checksum mismatch or parameters
            that do not match the stored config
    """
    raw_config, arrays = CheckpointRepository().load(path)
    try:
        config = AgentModelConfig(**raw_config)
    except ValidationError as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}")
    expected = init_driver_parameters(config)
    for name, arr in expected.items():
        if name not in arrays or arrays[name].shape != arr.shape:
            raise CheckpointError(f"{path}: parameter {name} is missing or has the wrong shape")
    if len(arrays) != len(expected):
        raise CheckpointError(f"{path}: unexpected parameters for this config")
    return CVRNNDriver(config, ParameterStore(arrays, dtype=np.dtype(config.precision)))
