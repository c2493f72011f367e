"""
Long-running acceptance checks on toy data.

Skipped unless DIFFDRIVE_RUN_SLOW=1.
"""

import math

import numpy as np
import pytest

from SHARED.drive_sdk.config_loader import AgentModelConfig, BirdviewConfig, TrainingConfig
from SHARED.drive_sdk.kinematics import bicycle_step_array
from SHARED.drive_sdk.models import RolloutMode, Scene, SceneAgent, Trajectory
from SHARED.drive_sdk.synth import synth_dataset
from agents.driver.model import CVRNNDriver
from agents.evaluator.gradcheck import run_suite
from agents.evaluator.metrics import ade, fde, mfd, min_over_k
from agents.fitter.fitting import fit_trajectory, recover_actions, replay
from agents.renderer.primitives import LAYERS, PALETTE, ConvexPolygon, DrawPrimitive, OrientedBox
from agents.renderer.rasterizer import pixel_grid, rasterize_hard, rasterize_soft
from agents.simulator.rollout import RolloutConfig, evaluate_rollouts, rollout, rollout_many
from agents.simulator.trainer import Trainer

pytestmark = pytest.mark.slow

TOY_AGENT = AgentModelConfig(
    hidden_dim=16,
    num_layers=2,
    latent_dim=2,
    birdview_resolution=32,
    extent_m=60.0,
    encoder_channels=[4, 8],
    feature_dim=16,
    mlp_dim=16,
    obs_sigma=0.1,
)
TOY_TRAINING = dict(epochs=30, batch_size=8, lr=1e-3, clip_norm=1.0, seed=0)


def _bicycle_trajectory(rng, l_r, steps=40, dt=0.1):
    start = [
        rng.uniform(-50, 50),
        rng.uniform(-50, 50),
        rng.uniform(-math.pi, math.pi),
        rng.uniform(5, 15),
    ]
    states = [np.array(start)]
    for _ in range(steps - 1):
        alpha, beta = rng.uniform(-1.0, 1.0), rng.uniform(-0.3, 0.3)
        states.append(bicycle_step_array(states[-1], alpha, beta, l_r, dt))
    return Trajectory.from_array(np.stack(states), dt)


def _without_warmup(scene: Scene) -> Scene:
    """Same future, but only the last observed step is seen"""
    start = scene.t_obs - 1
    agents = [
        SceneAgent(
            agent_id=a.agent_id,
            attributes=a.attributes,
            trajectory=Trajectory.from_array(
                a.trajectory.to_array()[start:], scene.dt, a.trajectory.mask_array()[start:]
            ),
        )
        for a in scene.agents
    ]
    return Scene(
        scene_id=scene.scene_id,
        agents=agents,
        map=scene.map,
        t_obs=1,
        horizon=scene.horizon - start,
    )


@pytest.fixture(scope="module")
def fork_data():
    train, _ = synth_dataset("fork", 120, seed=0, t_obs=10, horizon=40)
    held_out, _ = synth_dataset("fork", 30, seed=1, t_obs=10, horizon=40)
    return train, held_out


@pytest.fixture(scope="module")
def trained(fork_data):
    """Toy models per training regime, with their ELBO histories"""
    train, _ = fork_data
    models = {}
    for mode in ("classmates_forcing", "blank_future", "teacher_forced"):
        model = CVRNNDriver(TOY_AGENT)
        history = Trainer(model, TrainingConfig(mode=mode, **TOY_TRAINING)).train(train)
        models[mode] = (model, history)
    return models


class TestFittingAtScale:
    """Test l_r recovery on many generated trajectories"""

    def test_round_trip(self):
        """Test 1000 bicycle trajectories replay exactly and recover l_r"""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            length = round(float(rng.uniform(3.5, 5.5)), 2)
            l_r = math.floor(rng.uniform(0.2, 0.5) * length * 100) / 100
            traj = _bicycle_trajectory(rng, l_r)
            result = fit_trajectory(traj, length)
            assert np.abs(result.replayed.positions() - traj.positions()).max() < 1e-9
            assert abs(result.l_r - l_r) <= 0.01 + 1e-9

    def test_noisy_tracks(self):
        """Test noisy positions still replay exactly while the heading loss turns positive"""
        rng = np.random.default_rng(1)
        for _ in range(100):
            traj = _bicycle_trajectory(rng, 1.5)
            arr = traj.to_array()
            arr[:, :2] += rng.normal(0.0, 0.05, arr[:, :2].shape)
            noisy = Trajectory.from_array(arr, traj.dt)
            out = replay(noisy.states[0], recover_actions(noisy, 1.5), 1.5, noisy.dt)
            assert np.abs(out.positions() - noisy.positions()).max() < 1e-9
            assert fit_trajectory(noisy, 4.5).fit_loss > 0


class TestGradientSuites:
    """Test every suite at full size"""

    @pytest.mark.parametrize("suite", ["kinematics", "rasterizer", "agent"])
    def test_suite(self, suite):
        """Test 100 random points per suite"""
        assert run_suite(suite, points=100, seed=0).passed


class TestRasterizerConvergence:
    """Test soft rasterization against the hard oracle"""

    def test_random_scenes(self):
        """Test 50 random scenes agree away from edges at a sharp blend"""
        config = BirdviewConfig(resolution_px=32, extent_m=20.0, sigma_blend=1e-6, gamma_blend=1e-4)
        xs, ys = pixel_grid(32, 20.0)
        rng = np.random.default_rng(2)
        for _ in range(50):
            half = rng.uniform(3.0, 8.0)
            road = ConvexPolygon(
                np.array([[-10.0, -half], [10.0, -half], [10.0, half], [-10.0, half]])
            )
            prims = [DrawPrimitive(road, PALETTE["driveable"], LAYERS["driveable"])]
            for kind in ("agent", "agent", "ego"):
                box = OrientedBox(
                    rng.uniform(-6, 6, 2),
                    rng.uniform(2, 5),
                    rng.uniform(1, 2.5),
                    rng.uniform(-math.pi, math.pi),
                )
                prims.append(DrawPrimitive(box, PALETTE[kind], LAYERS[kind]))
            clear = np.ones((32, 32), dtype=bool)
            for p in prims:
                clear &= np.abs(p.geometry.signed_distance(xs, ys)) >= 2 * config.pixel_m
            soft = rasterize_soft(prims, config).pixels
            hard = rasterize_hard(prims, config).pixels
            assert np.abs(soft - hard)[:, clear].max() < 1 / 255


class TestMetricOracle:
    """Test best-of-K metrics against enumeration"""

    def test_random_instances(self):
        """Test 1000 random instances"""
        rng = np.random.default_rng(3)
        for _ in range(1000):
            k, steps = int(rng.integers(1, 7)), int(rng.integers(1, 31))
            samples = rng.normal(size=(k, steps, 2)) * 5
            gt = rng.normal(size=(steps, 2)) * 5
            ades = [math.sqrt(np.mean(np.sum((s - gt) ** 2, axis=1))) for s in samples]
            fdes = [math.hypot(*(s[-1] - gt[-1])) for s in samples]
            spread = max(math.hypot(*(a[-1] - b[-1])) for a in samples for b in samples)
            assert min_over_k(ade, samples, gt) == pytest.approx(min(ades), rel=1e-12)
            assert min_over_k(fde, samples, gt) == pytest.approx(min(fdes), rel=1e-12)
            assert mfd(samples) == pytest.approx(spread, rel=1e-12, abs=1e-12)


class TestToyTraining:
    """Test training on the fork dataset and the ablations"""

    def test_elbo_improves(self, trained):
        """Test the smoothed ELBO ends above where it started"""
        _, history = trained["classmates_forcing"]
        smoothed = history.smoothed
        assert all(np.isfinite(smoothed))
        assert smoothed[-1] > smoothed[0]
        assert np.mean(history.elbo[-5:]) > np.mean(history.elbo[:5])

    def test_fork_covers_both_branches(self, trained, fork_data):
        """Test six samples reach both branches in most held-out scenes"""
        _, held_out = fork_data
        model, _ = trained["classmates_forcing"]
        results = rollout_many(held_out, model, RolloutConfig(k_samples=6, seed=0))
        both = [np.ptp(np.sign(r.states[:, 0, -1, 2])) > 0 for r in results]
        assert np.mean(both) >= 0.8

    def test_ablations_lose_diversity(self, trained, fork_data):
        """Test blank-future and teacher-forced training collapse the sample spread"""
        _, held_out = fork_data
        config = RolloutConfig(k_samples=6, seed=0)
        spread = {}
        for mode, (model, _) in trained.items():
            report = evaluate_rollouts(held_out, rollout_many(held_out, model, config), k=6)
            spread[mode] = report
        full = spread["classmates_forcing"]
        for ablation in ("blank_future", "teacher_forced"):
            assert spread[ablation].mfd_k < 0.25 * full.mfd_k
            assert spread[ablation].min_ade_k > full.min_ade_k

    def test_warmup_lowers_error(self, trained, fork_data):
        """Test observing the whole history beats starting from the last observed step"""
        _, held_out = fork_data
        model, _ = trained["classmates_forcing"]
        config = RolloutConfig(k_samples=6, seed=0)
        warm = evaluate_rollouts(held_out, rollout_many(held_out, model, config), k=6)
        cold_scenes = [_without_warmup(s) for s in held_out]
        cold = evaluate_rollouts(cold_scenes, rollout_many(cold_scenes, model, config), k=6)
        assert warm.min_ade_k < cold.min_ade_k

    def test_blank_future_rollout_collapses(self, trained, fork_data):
        """Test the blank-future rollout mode on a trained model has almost no spread"""
        _, held_out = fork_data
        model, _ = trained["classmates_forcing"]
        generative = [rollout(s, model, RolloutConfig(k_samples=6, seed=0)) for s in held_out[:10]]
        blank_config = RolloutConfig(k_samples=6, seed=0, mode=RolloutMode.BLANK_FUTURE)
        blank = [rollout(s, model, blank_config) for s in held_out[:10]]
        g = np.mean([mfd(r.states[:, 0, :, :2]) for r in generative])
        b = np.mean([mfd(r.states[:, 0, :, :2]) for r in blank])
        assert b < g


class TestKinematicModes:
    """Test bicycle versus unconstrained actions"""

    def test_bicycle_beats_unconstrained(self, trained, fork_data):
        """Test the bicycle model reaches a lower held-out minADE"""
        train, held_out = fork_data
        bicycle, _ = trained["classmates_forcing"]
        free = CVRNNDriver(TOY_AGENT.model_copy(update={"kinematic_mode": "unconstrained"}))
        Trainer(free, TrainingConfig(**TOY_TRAINING)).train(train)
        config = RolloutConfig(k_samples=6, seed=0)
        a = evaluate_rollouts(held_out, rollout_many(held_out, bicycle, config), k=6)
        b = evaluate_rollouts(held_out, rollout_many(held_out, free, config), k=6)
        assert a.min_ade_k < b.min_ade_k
