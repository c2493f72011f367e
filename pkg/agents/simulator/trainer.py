"""
Variational training of the driver model.

Every agent present over the whole scene window is trained as an ego. Steps
before t_obs are teacher forced; afterwards the ego follows its own predicted
states while the other agents stay on ground truth (classmates forcing). The
loss is the negative single-sample ELBO summed over egos and steps, averaged
over the scenes of a batch.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.autodiff import Tape, Tensor
from SHARED.drive_sdk.config_loader import BirdviewConfig, TrainingConfig
from SHARED.drive_sdk.errors import NonFiniteError, TrainingDivergedError
from SHARED.drive_sdk.kinematics import ground_truth_actions
from SHARED.drive_sdk.logger import JsonLogger, NullLogger
from SHARED.drive_sdk.models import RolloutMode, Scene

from agents.driver.model import CVRNNDriver
from agents.driver.networks import Params, ParameterStore
from agents.renderer.rasterizer import blank_birdview, render_agents, render_birdview

from .optimizer import Adam, Gradients, clip_by_global_norm


class EpochRecord(BaseModel):
    """Training statistics for one epoch"""
    epoch: int
    elbo: float
    elbo_ema: float
    grad_norm: float = Field(ge=0)
    scenes: int


class TrainingHistory(BaseModel):
    """Per-epoch ELBO with an exponential moving average"""
    ema_decay: float = 0.9
    records: List[EpochRecord] = Field(default_factory=list)

    def append(self, epoch: int, elbo: float, grad_norm: float, scenes: int) -> EpochRecord:
        prev = self.records[-1].elbo_ema if self.records else elbo
        ema = self.ema_decay * prev + (1.0 - self.ema_decay) * elbo
        record = EpochRecord(
            epoch=epoch, elbo=elbo, elbo_ema=ema, grad_norm=grad_norm, scenes=scenes
        )
        self.records.append(record)
        return record

    @property
    def elbo(self) -> List[float]:
        return [r.elbo for r in self.records]

    @property
    def smoothed(self) -> List[float]:
        return [r.elbo_ema for r in self.records]


def training_agents(scene: Scene) -> List[int]:
    """Indices of agents present at every step of the scene"""
    valid = scene.valid_array()
    if valid.size == 0:
        return []
    return [int(i) for i in np.flatnonzero(valid.all(axis=1))]


class Trainer:
    """
    Minibatch trainer.

    Scenes of a batch are independent forward/backward passes, each on its own
    tape, and run on a thread pool; their gradients are summed in scene order.
    """

    def __init__(
        self,
        model: CVRNNDriver,
        config: Optional[TrainingConfig] = None,
        birdview: Optional[BirdviewConfig] = None,
        logger: Optional[JsonLogger] = None,
        threads: Optional[int] = None,
    ):
        """
        Initialize trainer.

        Args:
            model: Driver model; its parameters are updated in place
            config: Optimizer and schedule settings
            birdview: Blend settings; resolution and extent come from the model
            logger: Logger for epoch events
            threads: Worker cap for scene-parallel batches
        """
        self.model = model
        self.config = config or TrainingConfig()
        self.birdview = model.with_birdview(birdview or BirdviewConfig())
        self.logger = logger or NullLogger()
        self.threads = threads
        self.mode = RolloutMode(self.config.mode)
        self.optimizer = Adam(self.config.lr, self.config.beta1, self.config.beta2, self.config.eps)

    def _images(
        self,
        scene: Scene,
        joint,
        valid,
        egos: Sequence[int],
        cur: Optional[Tensor],
        blank: bool,
    ) -> Tensor:
        """(E, 3, R, R) birdviews, each with its own ego moved to `cur`"""
        if blank:
            img = blank_birdview(self.birdview).pixels
            return ad.constant(np.broadcast_to(img, (len(egos),) + img.shape).copy())
        if cur is None:
            views = render_agents(
                joint, scene.attributes, valid, scene.map, egos, self.birdview, threads=1
            )
            return ad.constant(np.stack([v.pixels for v in views]))
        N = len(valid)
        views = []
        for e, i in enumerate(egos):
            rows = np.zeros((N, 4), dtype=bool)
            rows[i] = True
            own = ad.where(rows, ad.broadcast_to(cur[e], (N, 4)), joint)
            bv = render_birdview(own, scene.attributes, valid, scene.map, i, self.birdview)
            views.append(bv.image)
        return ad.stack(views, axis=0)

    def scene_elbo(self, scene: Scene, p: Params, rng: np.random.Generator) -> Optional[Tensor]:
        """
        Summed single-sample ELBO of one scene.

        Args:
            scene: Training scene
            p: Bound parameters
            rng: Source of the reparameterization noise

        Returns:
            Scalar tensor, or None if the scene has no agent to train
        """
        egos = training_agents(scene)
        if not egos:
            return None
        model = self.model
        states, valid = scene.states_array(), scene.valid_array()
        l_r = scene.rear_axis_offsets()[egos]
        a_gt = np.stack([
            ground_truth_actions(model.mode, states[i], l_r[e], scene.dt)
            for e, i in enumerate(egos)
        ])
        forced = self.mode == RolloutMode.TEACHER_FORCED

        runtime = model.initial_state(len(egos))
        cur: Optional[Tensor] = None
        total: Optional[Tensor] = None
        for t in range(scene.horizon - 1):
            observed = t < scene.t_obs or forced
            if observed:
                cur = None
                if t > 0:
                    runtime.prev_action = ad.constant(a_gt[:, t - 1])
            images = self._images(
                scene, states[:, t], valid[:, t], egos, cur,
                blank=self.mode == RolloutMode.BLANK_FUTURE and t >= scene.t_obs,
            )
            s_cur = ad.constant(states[egos, t]) if cur is None else cur
            eps = rng.standard_normal((len(egos), model.config.latent_dim))
            term, runtime, _, pred = model.elbo_step(
                states[egos, t + 1], s_cur, images, runtime, a_gt[:, t], p, eps, l_r, scene.dt
            )
            total = term.sum() if total is None else total + term.sum()
            cur = pred
        return total

    def scene_loss(
        self, scene: Scene, store: ParameterStore, seed: Tuple[int, ...]
    ) -> Tuple[float, Optional[Gradients]]:
        """
        Negative ELBO of one scene and its gradient.

        Raises:
            TrainingDivergedError: If the forward or backward pass is not finite
        """
        tape = Tape(dtype=store.dtype)
        p = store.bind(tape)
        rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
        try:
            elbo = self.scene_elbo(scene, p, rng)
            if elbo is None:
                return 0.0, None
            loss = -elbo
            grads = tape.backward(loss)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"scene {scene.scene_id}: {exc}")
        out = {name: grads.wrt(p[name]).data for name in store.names()}
        if not all(np.all(np.isfinite(g)) for g in out.values()):
            raise TrainingDivergedError(f"scene {scene.scene_id}: non-finite gradient")
        return float(loss.data), out

    def train_step(
        self, scenes: Sequence[Scene], epoch: int, indices: Sequence[int]
    ) -> Tuple[float, float]:
        """
        One optimizer step on a batch.

        Returns:
            (mean negative ELBO over the batch, gradient norm before clipping)
        """
        store = self.model.params
        seeds = [(self.config.seed, epoch, int(i)) for i in indices]

        def one(job):
            scene, seed = job
            return self.scene_loss(scene, store, seed)

        jobs = list(zip(scenes, seeds))
        if self.threads == 1 or len(jobs) == 1:
            results = [one(j) for j in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(one, jobs))

        used = [(loss, g) for loss, g in results if g is not None]
        if not used:
            return 0.0, 0.0
        grads: Gradients = {}
        for _, g in used:
            for name, value in g.items():
                grads[name] = grads[name] + value if name in grads else value.copy()
        grads = {name: value / len(used) for name, value in grads.items()}
        grads, norm = clip_by_global_norm(grads, self.config.clip_norm)
        self.optimizer.step(store, grads)
        return float(np.mean([loss for loss, _ in used])), norm

    def train(self, scenes: Sequence[Scene], epochs: Optional[int] = None) -> TrainingHistory:
        """
        Run the optimizer over the dataset.

        Args:
            scenes: Training scenes (non-empty)
            epochs: Override for config.epochs

        Returns:
            TrainingHistory with one record per epoch

        Raises:
            ValueError: On an empty dataset
            TrainingDivergedError: On a non-finite loss or gradient
        """
        if not scenes:
            raise ValueError("training needs at least one scene")
        epochs = epochs if epochs is not None else self.config.epochs
        history = TrainingHistory(ema_decay=self.config.ema_decay)
        order_rng = np.random.default_rng(np.random.SeedSequence([self.config.seed]))
        B = self.config.batch_size
        self.logger.log_stage(
            "TRAINING_STARTED",
            scenes=len(scenes),
            epochs=epochs,
            mode=self.mode.value,
            parameters=self.model.params.num_parameters,
        )
        for epoch in range(1, epochs + 1):
            order = order_rng.permutation(len(scenes))
            losses, norms = [], []
            for start in range(0, len(order), B):
                idx = order[start:start + B]
                try:
                    loss, norm = self.train_step([scenes[i] for i in idx], epoch, idx)
                except TrainingDivergedError as exc:
                    self.logger.error(
                        "TRAINING_DIVERGED", epoch=epoch, batch_start=start, reason=str(exc)
                    )
                    raise
                losses.append(loss)
                norms.append(norm)
            mean_loss, mean_norm = float(np.mean(losses)), float(np.mean(norms))
            record = history.append(epoch, -mean_loss, mean_norm, len(scenes))
            self.logger.log_epoch(
                epoch,
                elbo=record.elbo,
                elbo_ema=record.elbo_ema,
                grad_norm=record.grad_norm,
                checksum=self.model.params.checksum(),
            )
        return history


def train(
    scenes: Sequence[Scene],
    model: CVRNNDriver,
    config: Optional[TrainingConfig] = None,
    birdview: Optional[BirdviewConfig] = None,
    logger: Optional[JsonLogger] = None,
    threads: Optional[int] = None,
) -> TrainingHistory:
    """Module-level convenience wrapper around `Trainer.train`"""
    return Trainer(model, config, birdview, logger, threads).train(scenes)

