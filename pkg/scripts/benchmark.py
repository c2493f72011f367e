"""
Performance Benchmarking Script for the differentiable driving simulator.

Measures the hot paths:
- Kinematic steps (tape and plain numpy)
- Soft and hard birdview rasterization
- Grid-search l_r fitting
- One joint rollout step
- One training step
"""

import json
import statistics
import time
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.config_loader import AgentModelConfig, BirdviewConfig, TrainingConfig
from SHARED.drive_sdk.kinematics import bicycle_step_array, kinematic_step
from SHARED.drive_sdk.models import KinematicMode, RolloutMode
from SHARED.drive_sdk.synth import synth_dataset
from agents.driver.model import CVRNNDriver
from agents.fitter.fitting import grid_search_lr
from agents.renderer.primitives import scene_to_primitives
from agents.renderer.rasterizer import rasterize_hard, rasterize_soft
from agents.simulator.rollout import active_agents, agent_rngs, step_joint, warmup
from agents.simulator.trainer import Trainer

BENCH_MODEL = AgentModelConfig(
    hidden_dim=16,
    num_layers=2,
    latent_dim=2,
    birdview_resolution=32,
    extent_m=60.0,
    encoder_channels=[4, 8],
    feature_dim=16,
    mlp_dim=16,
)


class BenchmarkResult:
    """Store benchmark results"""

    def __init__(self, name: str, iterations: int):
        self.name = name
        self.iterations = iterations
        self.times: List[float] = []

    def add_time(self, elapsed: float):
        """Add a timing measurement"""
        self.times.append(elapsed)

    @property
    def mean(self) -> float:
        """Mean execution time"""
        return statistics.mean(self.times) if self.times else 0.0

    @property
    def median(self) -> float:
        """Median execution time"""
        return statistics.median(self.times) if self.times else 0.0

    @property
    def stdev(self) -> float:
        """Standard deviation"""
        return statistics.stdev(self.times) if len(self.times) > 1 else 0.0

    @property
    def min_time(self) -> float:
        return min(self.times) if self.times else 0.0

    @property
    def max_time(self) -> float:
        return max(self.times) if self.times else 0.0

    @property
    def throughput(self) -> float:
        """Operations per second"""
        return 1.0 / self.mean if self.mean > 0 else 0.0

    def summary(self) -> Dict[str, Any]:
        """Get summary statistics"""
        return {
            "name": self.name,
            "iterations": self.iterations,
            "mean_ms": self.mean * 1000,
            "median_ms": self.median * 1000,
            "stdev_ms": self.stdev * 1000,
            "min_ms": self.min_time * 1000,
            "max_ms": self.max_time * 1000,
            "throughput_ops_per_sec": self.throughput,
        }


class PerformanceBenchmark:
    """Performance benchmarking suite"""

    def __init__(self, iterations: int = 20, resolution: int = 128):
        """
        Initialize benchmark suite.

        Args:
            iterations: Default number of iterations for each benchmark
            resolution: Birdview side in pixels for the rasterizer benchmarks
        """
        self.iterations = iterations
        self.resolution = resolution
        self.results: List[BenchmarkResult] = []
        scenes, _ = synth_dataset("roundabout-lite", 4, seed=0)
        self.scene = max(scenes, key=lambda s: s.num_agents)

    def run_benchmark(
        self, name: str, func: Callable, iterations: Optional[int] = None
    ) -> BenchmarkResult:
        """
        Run a benchmark test.

        Args:
            name: Name of the benchmark
            func: Function to benchmark (no arguments)
            iterations: Number of iterations (default: self.iterations)

        Returns:
            BenchmarkResult with timing statistics
        """
        iterations = iterations or self.iterations
        result = BenchmarkResult(name, iterations)

        print(f"Running benchmark: {name} ({iterations} iterations)...", end=" ", flush=True)

        for _ in range(iterations):
            start = time.perf_counter()
            func()
            result.add_time(time.perf_counter() - start)

        print(f"✓ (mean: {result.mean * 1000:.3f}ms)")

        self.results.append(result)
        return result

    def benchmark_kinematics(self):
        """Benchmark one bicycle step on the tape and in plain numpy"""
        rng = np.random.default_rng(0)
        states = np.column_stack(
            [rng.normal(size=(64, 2)), rng.uniform(-1, 1, 64), rng.uniform(1, 10, 64)]
        )
        actions = np.column_stack([rng.uniform(-2, 2, 64), rng.uniform(-0.3, 0.3, 64)])
        l_r = rng.uniform(1.0, 2.0, 64)

        def taped():
            tape = ad.Tape()
            x = tape.leaf(states)
            tape.backward(kinematic_step(KinematicMode.BICYCLE, x, actions, l_r, 0.1).sum())

        def plain():
            bicycle_step_array(states, actions[:, 0], actions[:, 1], l_r, 0.1)

        self.run_benchmark("Bicycle Step + Backward (64 agents)", taped, iterations=200)
        self.run_benchmark("Bicycle Step (numpy, 64 agents)", plain, iterations=2000)

    def benchmark_rasterization(self):
        """Benchmark soft and hard rasterization of one scene"""
        scene = self.scene
        config = BirdviewConfig(resolution_px=self.resolution, extent_m=60.0)
        prims = scene_to_primitives(
            scene.states_array()[:, 0], scene.attributes, scene.valid_array()[:, 0], scene.map, 0
        )
        res = self.resolution
        self.run_benchmark(f"Soft Rasterization ({res}px)", lambda: rasterize_soft(prims, config))
        self.run_benchmark(f"Hard Rasterization ({res}px)", lambda: rasterize_hard(prims, config))

    def benchmark_fitting(self):
        """Benchmark the l_r grid search for one trajectory"""
        agent = self.scene.agents[0]
        self.run_benchmark(
            "Grid-Search Fit (1 trajectory)",
            lambda: grid_search_lr(agent.trajectory, agent.attributes.length),
        )

    def benchmark_rollout_step(self):
        """Benchmark one joint step after warmup"""
        scene = self.scene
        model = CVRNNDriver(BENCH_MODEL)
        params = model.params.constants()
        bv = model.with_birdview(BirdviewConfig())
        egos = active_agents(scene)
        rngs = agent_rngs(0, 0, [scene.agents[i].agent_id for i in egos])
        runtime = warmup(scene, model, egos, rngs, bv, params, threads=1)
        t = scene.t_obs - 1
        states, valid = scene.states_array(), scene.valid_array()

        def step():
            step_joint(
                scene, t, states[:, t], valid[:, t], egos, runtime, model, rngs,
                RolloutMode.GENERATIVE, bv, params, threads=1,
            )

        self.run_benchmark(f"Rollout Step ({len(egos)} agents)", step)

    def benchmark_training_step(self):
        """Benchmark one optimizer step on one short scene"""
        scenes, _ = synth_dataset("straight", 1, seed=0, t_obs=4, horizon=8)
        trainer = Trainer(CVRNNDriver(BENCH_MODEL), TrainingConfig(batch_size=1), threads=1)
        self.run_benchmark(
            "Training Step (1 scene, 8 steps)",
            lambda: trainer.train_step(scenes, 1, [0]),
            iterations=max(1, self.iterations // 4),
        )

    def run_all(self):
        """Run all benchmarks"""
        print("\n" + "=" * 70)
        print("Differentiable Driving Simulator - Performance Benchmark Suite")
        print("=" * 70 + "\n")

        print("Category: Kinematics")
        print("-" * 70)
        self.benchmark_kinematics()

        print("\nCategory: Rendering")
        print("-" * 70)
        self.benchmark_rasterization()

        print("\nCategory: Fitting")
        print("-" * 70)
        self.benchmark_fitting()

        print("\nCategory: Simulation")
        print("-" * 70)
        self.benchmark_rollout_step()
        self.benchmark_training_step()

    def print_summary(self):
        """Print benchmark summary"""
        print("\n" + "=" * 70)
        print("Benchmark Summary")
        print("=" * 70 + "\n")

        print(f"{'Benchmark':<40} {'Mean (ms)':<12} {'Throughput (ops/s)':<20}")
        print("-" * 70)

        for result in self.results:
            print(f"{result.name:<40} {result.mean * 1000:>10.3f}  {result.throughput:>18.1f}")

    def export_results(self, filename: str = "benchmark_results.json"):
        """Export results to JSON file"""
        results_data = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "iterations": self.iterations,
            "resolution_px": self.resolution,
            "benchmarks": [result.summary() for result in self.results],
        }

        with open(filename, "w") as f:
            json.dump(results_data, f, indent=2)

        print(f"\nResults exported to: {filename}")


def main():
    """Run benchmark suite"""
    import argparse

    parser = argparse.ArgumentParser(description="Differentiable driving simulator benchmarks")
    parser.add_argument(
        "-i", "--iterations",
        type=int,
        default=20,
        help="Number of iterations per benchmark (default: 20)",
    )
    parser.add_argument(
        "-r", "--resolution",
        type=int,
        default=128,
        help="Birdview side in pixels for the rasterizer benchmarks (default: 128)",
    )
    parser.add_argument(
        "-o", "--output",
        type=str,
        default="benchmark_results.json",
        help="Output file for results (default: benchmark_results.json)",
    )

    args = parser.parse_args()

    benchmark = PerformanceBenchmark(iterations=args.iterations, resolution=args.resolution)
    benchmark.run_all()
    benchmark.print_summary()
    benchmark.export_results(args.output)

    print("\n✓ Benchmark suite completed successfully!")


if __name__ == "__main__":
    main()
