"""
Unit tests for the optimizer, joint rollouts and the trainer.
"""

import tempfile
from pathlib import Path

import numpy as np
import pytest

from SHARED.drive_sdk.config_loader import TrainingConfig
from SHARED.drive_sdk.errors import EgoNotPresentError, ShapeError
from SHARED.drive_sdk.logger import JsonLogger
from SHARED.drive_sdk.models import RolloutMode, Scene
from agents.driver.model import CVRNNDriver
from agents.driver.networks import ParameterStore
from agents.evaluator.gradcheck import TINY_AGENT
from agents.evaluator.metrics import mfd
from agents.simulator.optimizer import Adam, clip_by_global_norm, global_norm
from agents.simulator.rollout import (
    RolloutConfig,
    active_agents,
    agent_rngs,
    evaluate_rollouts,
    rollout,
    rollout_many,
    step_joint,
    warmup,
)
from agents.simulator.trainer import Trainer, TrainingHistory, training_agents
from tests.conftest import build_scene, straight_states


def _lanes(n, t_obs=2):
    states = [straight_states(2.0 * i, 3.5 * i, v=8.0 + i) for i in range(n)]
    return build_scene(states, t_obs=t_obs)


class TestOptimizer:
    """Test gradient clipping and Adam"""

    def test_global_norm(self):
        """Test the norm spans every array"""
        assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == pytest.approx(5.0)

    def test_clip_scales_down(self):
        """Test gradients above the cap are rescaled to it"""
        grads, norm = clip_by_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(grads["a"], [0.6, 0.8])

    def test_clip_leaves_small_and_zero(self):
        """Test gradients under the cap, zero gradients and no cap are untouched"""
        small = {"a": np.array([0.3, 0.4])}
        assert clip_by_global_norm(small, 1.0)[0]["a"].tolist() == [0.3, 0.4]
        zero = {"a": np.zeros(2)}
        assert clip_by_global_norm(zero, 1.0)[0]["a"].tolist() == [0.0, 0.0]
        big = {"a": np.array([30.0, 40.0])}
        assert clip_by_global_norm(big, None)[0]["a"].tolist() == [30.0, 40.0]

    def test_zero_learning_rate(self):
        """Test lr = 0 leaves parameters bit-identical"""
        store = ParameterStore({"w": np.array([1.0, -2.0, 0.5])})
        before = store["w"].copy()
        Adam(lr=0.0).step(store, {"w": np.array([1.0, 1.0, 1.0])})
        np.testing.assert_array_equal(store["w"], before)

    def test_first_step_is_lr_sign(self):
        """Test the bias-corrected first Adam step moves each entry by about lr"""
        store = ParameterStore({"w": np.zeros(3)})
        Adam(lr=0.1).step(store, {"w": np.array([2.0, -0.5, 0.01])})
        np.testing.assert_allclose(store["w"], [-0.1, 0.1, -0.1], rtol=1e-4)

    def test_missing_gradient_skipped(self):
        """Test parameters without a gradient are not moved"""
        store = ParameterStore({"w": np.ones(2), "b": np.ones(2)})
        Adam(lr=0.1).step(store, {"w": np.ones(2)})
        np.testing.assert_array_equal(store["b"], np.ones(2))

    def test_negative_lr(self):
        """Test a negative learning rate raises ValueError"""
        with pytest.raises(ValueError):
            Adam(lr=-1.0)


class TestRolloutConfig:
    """Test rollout settings validation"""

    def test_classmates_needs_ego(self):
        """Test classmates forcing without an ego index raises"""
        with pytest.raises(ValueError):
            RolloutConfig(mode=RolloutMode.CLASSMATES_FORCING)

    def test_negative_seed(self):
        """Test negative seeds are rejected"""
        with pytest.raises(ValueError):
            RolloutConfig(seed=-1)

    def test_agent_rngs_keyed_by_id(self):
        """Test per-agent streams depend on the id, not the position"""
        a = agent_rngs(4, 0, [10, 20])
        b = agent_rngs(4, 0, [20, 10])
        assert a[0].standard_normal() == b[1].standard_normal()


class TestWarmupAndStep:
    """Test warmup and single joint steps"""

    def test_active_agents(self):
        """Test agents missing from the observed window are not predicted"""
        masks = [np.ones(6, dtype=bool), np.array([False, True, True, True, True, True])]
        scene = build_scene([straight_states(), straight_states(0.0, 3.5)], masks=masks, t_obs=2)
        assert active_agents(scene) == [0]

    def test_warmup_single_step_changes_memory(self, tiny_model):
        """Test one observed step already moves the hidden state off zero"""
        scene = build_scene([straight_states(), straight_states(5.0, 3.5)], t_obs=1)
        runtime = warmup(scene, tiny_model, [0, 1], agent_rngs(0, 0, [0, 1]))
        assert np.abs(runtime.h[-1].data).max() > 0
        assert runtime.feat is not None and runtime.z is not None

    def test_warmup_generator_count(self, tiny_model, two_agent_scene):
        """Test a generator per ego is required"""
        with pytest.raises(ShapeError):
            warmup(two_agent_scene, tiny_model, [0, 1], agent_rngs(0, 0, [0]))

    def test_warmup_missing_ego(self, tiny_model):
        """Test an ego absent from the observed window raises EgoNotPresentError"""
        masks = [np.ones(6, dtype=bool), np.array([True, False, True, True, True, True])]
        scene = build_scene([straight_states(), straight_states(0.0, 3.5)], masks=masks, t_obs=2)
        with pytest.raises(EgoNotPresentError):
            warmup(scene, tiny_model, [1], agent_rngs(0, 0, [1]))

    def test_zero_action_keeps_state(self):
        """Test a model decoding zero deltas leaves the agent where it was"""
        model = CVRNNDriver(TINY_AGENT.model_copy(update={"kinematic_mode": "unconstrained"}))
        model.params["dec.fc2.weight"] = np.zeros_like(model.params["dec.fc2.weight"])
        model.params["dec.fc2.bias"] = np.zeros_like(model.params["dec.fc2.bias"])
        scene = build_scene([straight_states()], t_obs=2)
        rngs = agent_rngs(0, 0, [0])
        bv = model.birdview_config
        params = model.params.constants()
        runtime = warmup(scene, model, [0], rngs, bv, params)
        states, valid = scene.states_array(), scene.valid_array()
        out = step_joint(scene, 1, states[:, 1], valid[:, 1], [0], runtime, model, rngs,
                         RolloutMode.GENERATIVE, bv, params)
        np.testing.assert_allclose(out.joint_states[0], states[0, 1], atol=1e-12)
        np.testing.assert_array_equal(out.actions, 0.0)

    def test_teacher_forced_pins_everyone(self, tiny_model, two_agent_scene):
        """Test teacher forcing keeps every agent on ground truth"""
        scene = two_agent_scene
        rngs = agent_rngs(0, 0, [0, 1])
        bv, params = tiny_model.birdview_config, tiny_model.params.constants()
        runtime = warmup(scene, tiny_model, [0, 1], rngs, bv, params)
        states, valid = scene.states_array(), scene.valid_array()
        out = step_joint(scene, 1, states[:, 1], valid[:, 1], [0, 1], runtime, tiny_model, rngs,
                         RolloutMode.TEACHER_FORCED, bv, params)
        np.testing.assert_array_equal(out.joint_states, states[:, 2])
        assert out.predicted.shape == (2, 4)


class TestRollout:
    """Test K-sample joint rollouts"""

    def test_shape_single_sample(self, tiny_model, two_agent_scene):
        """Test K = 1 yields horizon - t_obs predicted steps per agent"""
        result = rollout(two_agent_scene, tiny_model, RolloutConfig(k_samples=1))
        assert result.states.shape == (1, 2, 4, 4)
        assert result.actions.shape == (1, 2, 4, 2)
        assert result.z.shape == (1, 2, 4, TINY_AGENT.latent_dim)
        assert result.agent_ids == [0, 1]
        assert np.all(np.isfinite(result.states))

    def test_same_seed_same_future(self, tiny_model, two_agent_scene):
        """Test a fixed seed reproduces the rollout exactly"""
        config = RolloutConfig(k_samples=3, seed=11)
        a = rollout(two_agent_scene, tiny_model, config)
        b = rollout(two_agent_scene, tiny_model, config)
        np.testing.assert_array_equal(a.states, b.states)

    def test_threads_do_not_change_result(self, tiny_model, two_agent_scene):
        """Test parallel and sequential sampling agree"""
        a = rollout(two_agent_scene, tiny_model, RolloutConfig(k_samples=3, seed=2, threads=1))
        b = rollout(two_agent_scene, tiny_model, RolloutConfig(k_samples=3, seed=2, threads=3))
        np.testing.assert_array_equal(a.states, b.states)

    def test_samples_are_diverse(self, tiny_model, two_agent_scene):
        """Test six samples differ and spread their final positions"""
        result = rollout(two_agent_scene, tiny_model, RolloutConfig(k_samples=6, seed=0))
        finals = result.states[:, 0, -1, :2]
        assert len({tuple(np.round(f, 12)) for f in finals}) == 6
        assert mfd(result.states[:, 0, :, :2]) > 0

    @pytest.mark.parametrize("n", [1, 2, 8])
    def test_agent_counts(self, tiny_model, n):
        """Test scenes with one, two and eight agents roll out"""
        result = rollout(_lanes(n), tiny_model, RolloutConfig(k_samples=2))
        assert result.states.shape == (2, n, 4, 4)

    def test_agent_order_does_not_matter(self, tiny_model, two_agent_scene):
        """Test permuting the agent list permutes the prediction and nothing else"""
        scene = two_agent_scene
        swapped = Scene(
            scene_id=scene.scene_id, agents=list(reversed(scene.agents)), map=scene.map,
            t_obs=scene.t_obs, horizon=scene.horizon,
        )
        a = rollout(scene, tiny_model, RolloutConfig(k_samples=1, seed=5))
        b = rollout(swapped, tiny_model, RolloutConfig(k_samples=1, seed=5))
        assert b.agent_ids == [1, 0]
        np.testing.assert_allclose(a.states, b.states[:, ::-1], atol=1e-8)

    def test_classmates_forcing(self, tiny_model, two_agent_scene):
        """Test the ego is predicted while the other agent replays ground truth"""
        config = RolloutConfig(k_samples=1, mode=RolloutMode.CLASSMATES_FORCING, ego_index=0)
        forced = rollout(two_agent_scene, tiny_model, config)
        free = rollout(two_agent_scene, tiny_model, RolloutConfig(k_samples=1))
        assert forced.states.shape == free.states.shape
        assert not np.array_equal(forced.states[0, 0], free.states[0, 0])

    def test_classmates_missing_ego(self, tiny_model, two_agent_scene):
        """Test an ego outside the scene raises EgoNotPresentError"""
        config = RolloutConfig(k_samples=1, mode=RolloutMode.CLASSMATES_FORCING, ego_index=5)
        with pytest.raises(EgoNotPresentError):
            rollout(two_agent_scene, tiny_model, config)

    def test_blank_future(self, tiny_model, two_agent_scene):
        """Test the blank-future ablation runs and differs from full rendering"""
        blank_config = RolloutConfig(k_samples=1, mode=RolloutMode.BLANK_FUTURE)
        blank = rollout(two_agent_scene, tiny_model, blank_config)
        full = rollout(two_agent_scene, tiny_model, RolloutConfig(k_samples=1))
        np.testing.assert_array_equal(blank.states[0, :, 0], full.states[0, :, 0])
        assert not np.array_equal(blank.states, full.states)

    def test_logs_completion(self, tiny_model, two_agent_scene):
        """Test rollouts log ROLLOUT_COMPLETED"""
        with tempfile.TemporaryDirectory() as tmpdir:
            logger = JsonLogger("sim", tmpdir)
            rollout(two_agent_scene, tiny_model, RolloutConfig(k_samples=1), logger=logger)
            assert "ROLLOUT_COMPLETED" in (Path(tmpdir) / "sim.log.jsonl").read_text()

    def test_evaluate_rollouts(self, tiny_model, two_agent_scene):
        """Test rollouts are scored against their scenes and unknown scenes raise"""
        results = rollout_many([two_agent_scene], tiny_model, RolloutConfig(k_samples=2))
        report = evaluate_rollouts([two_agent_scene], results, k=2)
        assert report.k == 2
        assert len(report.agents) == 2
        assert report.min_ade_k is not None and report.min_ade_k >= 0
        other = build_scene([straight_states()], scene_id="other")
        with pytest.raises(KeyError):
            evaluate_rollouts([other], results, k=2)


class TestTrainer:
    """Test the variational trainer"""

    def _config(self, **kwargs):
        return TrainingConfig(**{"epochs": 1, "batch_size": 2, "lr": 1e-3, "seed": 3, **kwargs})

    def test_training_agents(self):
        """Test only agents present at every step are trained"""
        masks = [np.ones(6, dtype=bool), np.array([True] * 5 + [False])]
        scene = build_scene([straight_states(), straight_states(0.0, 3.5)], masks=masks)
        assert training_agents(scene) == [0]

    def test_empty_dataset(self, tiny_model):
        """Test training on no scenes raises ValueError"""
        with pytest.raises(ValueError):
            Trainer(tiny_model, self._config()).train([])

    def test_step_updates_parameters(self, tiny_model, straight_data):
        """Test one batch produces a finite loss and moves the parameters"""
        scenes, _ = straight_data
        before = tiny_model.params.checksum()
        trainer = Trainer(tiny_model, self._config(), threads=1)
        loss, norm = trainer.train_step(scenes[:2], 1, [0, 1])
        assert np.isfinite(loss) and norm > 0
        assert tiny_model.params.checksum() != before

    def test_reproducible(self, straight_data):
        """Test the same seed gives the same history and parameters"""
        scenes, _ = straight_data
        runs = []
        for threads in (1, 2):
            model = CVRNNDriver(TINY_AGENT)
            history = Trainer(model, self._config(epochs=2), threads=threads).train(scenes)
            runs.append((history.elbo, model.params.checksum()))
        assert runs[0] == runs[1]

    def test_history_records(self, tiny_model, straight_data):
        """Test one record per epoch and EPOCH logs"""
        scenes, _ = straight_data
        with tempfile.TemporaryDirectory() as tmpdir:
            logger = JsonLogger("trainer", tmpdir)
            trainer = Trainer(tiny_model, self._config(epochs=2), logger=logger, threads=1)
            history = trainer.train(scenes)
            log = (Path(tmpdir) / "trainer.log.jsonl").read_text()
        assert [r.epoch for r in history.records] == [1, 2]
        assert "TRAINING_STARTED" in log

    def test_scene_without_agents(self, tiny_model):
        """Test a scene with no fully present agent contributes nothing"""
        masks = [np.array([True] * 5 + [False])]
        scene = build_scene([straight_states()], masks=masks)
        trainer = Trainer(tiny_model, self._config())
        loss, grads = trainer.scene_loss(scene, tiny_model.params, (0, 0, 0))
        assert loss == 0.0 and grads is None


class TestTrainingHistory:
    """Test the epoch history"""

    def test_ema(self):
        """Test the moving average starts at the first value"""
        history = TrainingHistory(ema_decay=0.5)
        history.append(1, -10.0, 1.0, 3)
        history.append(2, -6.0, 1.0, 3)
        assert history.elbo == [-10.0, -6.0]
        assert history.smoothed == [-10.0, -8.0]
