"""
Command-line interface for the differentiable driving simulator.

Subcommands:
    fit-kinematics  fit l_r per vehicle track
    render          write one ego-centric birdview PNG
    train           train the driver model and write a checkpoint
    rollout         sample joint futures from a checkpoint
    evaluate        best-of-K metrics for exported rollouts
    gradcheck       finite-difference checks of the differentiable parts
    synth           generate a toy dataset

Option values are resolved per flag: command line, then DIFFDRIVE_<FLAG>
environment variables (a .env file is honoured), then the --config JSON file,
then the packaged defaults under SHARED/config/.

Exit codes: 0 success, 2 usage error (bad flags or input files), 3 runtime error.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from SHARED.drive_sdk.config_loader import (
    AgentModelConfig,
    BirdviewConfig,
    ConfigLoader,
    TrainingConfig,
    get_config_loader,
)
from SHARED.drive_sdk.errors import USAGE_ERRORS, ConfigError, EgoNotPresentError
from SHARED.drive_sdk.logger import JsonLogger
from SHARED.drive_sdk.models import KinematicMode, MapData, RolloutMode, Scene
from SHARED.drive_sdk.repositories import (
    MapRepository,
    ReportRepository,
    RolloutRepository,
    TrackRepository,
)
from SHARED.drive_sdk.synth import SYNTH_KINDS, synth_dataset

from agents.driver.model import CVRNNDriver, load_checkpoint, save_checkpoint
from agents.evaluator.gradcheck import SUITES, run_suites
from agents.fitter.fitting import KinematicsFitter, apply_fits, rear_axis_histogram
from agents.renderer.rasterizer import render_birdview, save_png
from agents.simulator.rollout import RolloutConfig, active_agents, evaluate_rollouts, rollout
from agents.simulator.trainer import Trainer

ENV_PREFIX = "DIFFDRIVE_"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

TRAIN_MODES = ("classmates_forcing", "blank_future", "teacher_forced")
ROLLOUT_MODES = tuple(m.value for m in RolloutMode)

REQUIRED: Dict[str, List[str]] = {
    "fit-kinematics": ["tracks", "out"],
    "render": ["tracks", "frame", "ego", "out"],
    "train": ["tracks", "checkpoint"],
    "rollout": ["tracks", "checkpoint", "out"],
    "evaluate": ["tracks", "rollouts"],
    "gradcheck": [],
    "synth": ["out_tracks", "out_map"],
}


class CliConfig(BaseModel):
    """Resolved options of one invocation; unset flags stay None"""
    model_config = ConfigDict(extra="forbid")

    command: str
    seed: int = Field(default=0, ge=0)
    threads: Optional[int] = Field(default=None, ge=1)
    log_level: str = "INFO"
    log_dir: str = "SHARED/logs"

    # inputs and outputs
    tracks: Optional[Path] = None
    map: Optional[Path] = None
    out: Optional[Path] = None
    histogram: Optional[Path] = None
    checkpoint: Optional[Path] = None
    init: Optional[Path] = None
    history: Optional[Path] = None
    rollouts: Optional[Path] = None
    out_tracks: Optional[Path] = None
    out_map: Optional[Path] = None

    # time grid
    dt: Optional[float] = Field(default=None, gt=0)
    t_obs: Optional[int] = Field(default=None, ge=1)
    horizon: Optional[int] = Field(default=None, ge=2)
    stride: Optional[int] = Field(default=None, ge=1)

    # rendering
    frame: Optional[int] = None
    ego: Optional[int] = None
    hard: bool = False
    resolution: Optional[int] = Field(default=None, gt=0)
    extent: Optional[float] = Field(default=None, gt=0)
    sigma_blend: Optional[float] = Field(default=None, gt=0)
    gamma_blend: Optional[float] = Field(default=None, gt=0)

    # training and rollout
    mode: Optional[str] = None
    kinematic_mode: Optional[KinematicMode] = None
    epochs: Optional[int] = Field(default=None, ge=1)
    lr: Optional[float] = Field(default=None, ge=0)
    batch_size: Optional[int] = Field(default=None, ge=1)
    clip_norm: Optional[float] = Field(default=None, gt=0)
    k: Optional[int] = Field(default=None, ge=1)
    noise_on_states: bool = False

    # evaluation, checks, toy data
    variant: str = "rms"
    bins: int = Field(default=20, ge=1)
    suite: str = "all"
    points: int = Field(default=100, ge=1)
    kind: str = "straight"
    n_scenes: int = Field(default=100, ge=1)

    @field_validator("log_level")
    @classmethod
    def validate_level(cls, v: str) -> str:
        v = v.upper()
        if v not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ValueError(f"unknown log level {v!r}")
        return v

    @model_validator(mode="after")
    def validate_choices(self) -> "CliConfig":
        if self.t_obs is not None and self.horizon is not None and self.t_obs >= self.horizon:
            raise ValueError("t_obs must be smaller than horizon")
        if self.mode is not None:
            allowed = TRAIN_MODES if self.command == "train" else ROLLOUT_MODES
            if self.mode not in allowed:
                raise ValueError(f"mode {self.mode!r} is not one of {allowed}")
        if self.variant not in ("rms", "mean"):
            raise ValueError("variant must be rms or mean")
        if self.suite != "all" and self.suite not in SUITES:
            raise ValueError(f"unknown gradcheck suite {self.suite!r}")
        if self.kind not in SYNTH_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        return self


# Parser
def _global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--seed",
        type=int,
        help="Random seed for sampling, training and synthetic data (default: 0)",
    )
    parser.add_argument("--threads", type=int, help="Worker thread cap (default: available cores)")
    parser.add_argument(
        "--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Minimum log level"
    )
    parser.add_argument("--log-dir", help="Directory for JSONL logs (default: SHARED/logs)")
    parser.add_argument(
        "--config", type=Path, help="JSON file with option values keyed by flag name"
    )


def _window_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dt", type=float, help="Frame period in seconds (default: 0.1)")
    parser.add_argument("--t-obs", type=int, help="Observed steps per scene (default: 10)")
    parser.add_argument("--horizon", type=int, help="Steps per scene (default: 40)")
    parser.add_argument("--stride", type=int, help="Frames between scene windows (default: 10)")


def _blend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--sigma-blend", type=float, help="Soft rasterizer edge sharpness (default: 1e-4)"
    )
    parser.add_argument(
        "--gamma-blend", type=float, help="Soft rasterizer depth sharpness (default: 1e-2)"
    )


def build_parser() -> argparse.ArgumentParser:
    """Argument parser for every subcommand; unset flags parse as None"""
    parser = argparse.ArgumentParser(
        prog="diffdrive",
        description="Differentiable 2D multi-agent driving simulator",
        epilog=(
            "Every flag can also be set with DIFFDRIVE_<FLAG> (e.g. DIFFDRIVE_DT=0.1) "
            "or in the --config file."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-kinematics", help="Fit the rear-axle offset of every vehicle track")
    p.add_argument("--tracks", type=Path, help="Track CSV")
    p.add_argument("--dt", type=float, help="Frame period in seconds (default: 0.1)")
    p.add_argument("--out", type=Path, help="Output CSV with track_id, l_r, fit_loss")
    p.add_argument("--histogram", type=Path, help="Optional CSV with the l_r/length histogram")
    p.add_argument("--bins", type=int, help="Histogram bins (default: 20)")

    p = sub.add_parser("render", help="Render one ego-centric birdview to PNG")
    p.add_argument("--tracks", type=Path, help="Track CSV")
    p.add_argument("--map", type=Path, help="Map JSON (default: empty map)")
    p.add_argument("--frame", type=int, help="frame_id to render")
    p.add_argument("--ego", type=int, help="track_id of the ego agent")
    p.add_argument("--out", type=Path, help="Output PNG")
    p.add_argument(
        "--hard",
        action="store_true",
        default=None,
        help="Use the non-differentiable reference rasterizer",
    )
    p.add_argument("--resolution", type=int, help="Image side in pixels (default: 256)")
    p.add_argument(
        "--extent", type=float, help="Side of the rendered square in meters (default: 100)"
    )
    p.add_argument("--dt", type=float, help="Frame period in seconds (default: 0.1)")
    _blend_flags(p)

    p = sub.add_parser("train", help="Train the driver model")
    p.add_argument("--tracks", type=Path, help="Track CSV")
    p.add_argument("--map", type=Path, help="Map JSON (default: empty map)")
    p.add_argument("--checkpoint", type=Path, help="Output checkpoint JSON")
    p.add_argument("--init", type=Path, help="Checkpoint to continue from")
    p.add_argument("--history", type=Path, help="Optional CSV with per-epoch ELBO")
    p.add_argument(
        "--mode", choices=TRAIN_MODES, help="Training regime (default: classmates_forcing)"
    )
    p.add_argument(
        "--kinematic-mode",
        choices=[m.value for m in KinematicMode],
        help="Action space (default: bicycle)",
    )
    p.add_argument("--epochs", type=int, help="Passes over the dataset")
    p.add_argument("--lr", type=float, help="Learning rate (default: 3e-4)")
    p.add_argument("--batch-size", type=int, help="Scenes per optimizer step (default: 8)")
    p.add_argument("--clip-norm", type=float, help="Global gradient-norm clip (default: 1.0)")
    _window_flags(p)
    _blend_flags(p)

    p = sub.add_parser("rollout", help="Sample K joint futures per scene")
    p.add_argument("--tracks", type=Path, help="Track CSV")
    p.add_argument("--map", type=Path, help="Map JSON (default: empty map)")
    p.add_argument("--checkpoint", type=Path, help="Trained model checkpoint")
    p.add_argument("--out", type=Path, help="Output file (.csv or .json)")
    p.add_argument("--k", type=int, help="Samples per scene (default: 6)")
    p.add_argument("--mode", choices=ROLLOUT_MODES, help="Rollout regime (default: generative)")
    p.add_argument("--ego", type=int, help="track_id of the ego for classmates_forcing")
    p.add_argument(
        "--noise-on-states",
        action="store_true",
        default=None,
        help="Add Gaussian noise to predicted states",
    )
    _window_flags(p)
    _blend_flags(p)

    p = sub.add_parser("evaluate", help="minADE_k, minFDE_k and MFD_k of exported rollouts")
    p.add_argument("--tracks", type=Path, help="Ground-truth track CSV")
    p.add_argument("--map", type=Path, help="Map JSON (unused by the metrics)")
    p.add_argument("--rollouts", type=Path, help="Rollout export (.csv or .json)")
    p.add_argument("--k", type=int, help="Samples to use (default: 6)")
    p.add_argument("--variant", choices=["rms", "mean"], help="ADE variant (default: rms)")
    p.add_argument("--out", type=Path, help="Optional report (.csv or .json)")
    _window_flags(p)

    p = sub.add_parser("gradcheck", help="Compare analytic gradients with finite differences")
    p.add_argument("--suite", choices=sorted(SUITES) + ["all"], help="Suite to run (default: all)")
    p.add_argument("--points", type=int, help="Random points per suite (default: 100)")

    p = sub.add_parser("synth", help="Generate a toy dataset")
    p.add_argument("--kind", choices=list(SYNTH_KINDS), help="Dataset kind (default: straight)")
    p.add_argument("--n-scenes", type=int, help="Number of scenes (default: 100)")
    p.add_argument("--out-tracks", type=Path, help="Output track CSV")
    p.add_argument("--out-map", type=Path, help="Output map JSON")
    _window_flags(p)

    for child in sub.choices.values():
        _global_flags(child)
    return parser


# Option resolution
def packaged_defaults(command: str, loader: ConfigLoader) -> Dict[str, Any]:
    """Defaults from SHARED/config/ for one subcommand"""
    system = loader.load_system()
    training = loader.load_training()
    driver = loader.load_driver()
    sim, bv = system.simulation, system.birdview
    defaults: Dict[str, Any] = {
        "seed": 0,
        "threads": os.cpu_count() or 1,
        "log_level": system.logging.level,
        "log_dir": system.logging.log_dir,
        "dt": sim.dt,
        "t_obs": sim.t_obs,
        "horizon": sim.horizon,
        "stride": sim.stride,
        "resolution": bv.resolution_px,
        "extent": bv.extent_m,
        "sigma_blend": bv.sigma_blend,
        "gamma_blend": bv.gamma_blend,
        "k": system.rollout.k_samples,
        "noise_on_states": system.rollout.noise_on_states,
        "kinematic_mode": driver.kinematic_mode,
        "epochs": training.epochs,
        "lr": training.lr,
        "batch_size": training.batch_size,
        "clip_norm": training.clip_norm,
        "hard": False,
    }
    defaults["mode"] = training.mode if command == "train" else system.rollout.mode
    return defaults


def _read_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve_config(
    args: argparse.Namespace,
    environ: Optional[Dict[str, str]] = None,
    loader: Optional[ConfigLoader] = None,
) -> CliConfig:
    """
    Merge flags, environment, config file and defaults into a validated CliConfig.

    Raises:
        ConfigError: On an unreadable config file, an invalid value or a
            missing required option
    """
    environ = os.environ if environ is None else environ
    loader = loader or get_config_loader()
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    from_file = _read_config_file(args.config)
    defaults = packaged_defaults(args.command, loader)

    values: Dict[str, Any] = {"command": args.command}
    for name, flag_value in flags.items():
        env_value = environ.get(ENV_PREFIX + name.upper())
        if flag_value is not None:
            values[name] = flag_value
        elif env_value not in (None, ""):
            values[name] = env_value
        elif name in from_file:
            values[name] = from_file[name]
        elif name in defaults:
            values[name] = defaults[name]

    missing = [n for n in REQUIRED[args.command] if values.get(n) is None]
    if missing:
        flag = missing[0].replace("_", "-")
        raise ConfigError(f"{args.command}: missing required option --{flag}")
    try:
        return CliConfig(**values)
    except ValidationError as exc:
        err = exc.errors()[0]
        name = "--" + str(err["loc"][0]).replace("_", "-") if err["loc"] else args.command
        raise ConfigError(f"{name}: {err['msg']}")


def _logger(component: str, cfg: CliConfig) -> JsonLogger:
    return JsonLogger(component, cfg.log_dir, cfg.log_level)


def _load_map(cfg: CliConfig) -> Optional[MapData]:
    return MapRepository().load_map(cfg.map) if cfg.map else None


def _load_scenes(cfg: CliConfig, fit: bool = True) -> List[Scene]:
    """Windowed scenes; vehicles get their fitted rear-axle offset when `fit` is set"""
    repo = TrackRepository(cfg.dt)
    scenes = repo.load_tracks(cfg.tracks, cfg.t_obs, cfg.horizon, cfg.stride, _load_map(cfg))
    if not fit or not scenes:
        return scenes
    fitter = KinematicsFitter(_logger("fitter", cfg), cfg.threads)
    return apply_fits(scenes, fitter.fit_tracks(repo.load_track_table(cfg.tracks)))


def _birdview(cfg: CliConfig) -> BirdviewConfig:
    return BirdviewConfig(
        resolution_px=cfg.resolution,
        extent_m=cfg.extent,
        sigma_blend=cfg.sigma_blend,
        gamma_blend=cfg.gamma_blend,
    )


# Subcommands
def cmd_fit_kinematics(cfg: CliConfig, logger: JsonLogger) -> int:
    """Per-vehicle l_r table and optional histogram"""
    table = TrackRepository(cfg.dt).load_track_table(cfg.tracks)
    fits = KinematicsFitter(_logger("fitter", cfg), cfg.threads).fit_tracks(table)
    reports = ReportRepository()
    reports.save_table(fits, cfg.out, columns=["track_id", "l_r", "fit_loss"])
    if cfg.histogram:
        counts, edges = rear_axis_histogram(fits, cfg.bins)
        reports.save_histogram(counts, edges, cfg.histogram)
    worst = max((f.fit_loss for f in fits), default=0.0)
    logger.info("FIT_KINEMATICS_COMPLETED", tracks=len(table), fitted=len(fits), max_fit_loss=worst)
    print(f"fitted {len(fits)} of {len(table)} tracks, max fit_loss {worst:.3g} -> {cfg.out}")
    return EXIT_OK


def cmd_render(cfg: CliConfig, logger: JsonLogger) -> int:
    """One birdview centered on the ego at the requested frame"""
    ids, attributes, states = TrackRepository(cfg.dt).snapshot(cfg.tracks, cfg.frame)
    if cfg.ego not in ids:
        raise EgoNotPresentError(f"track {cfg.ego} is not present at frame {cfg.frame}")
    view = render_birdview(
        states,
        attributes,
        [True] * len(ids),
        _load_map(cfg) or MapData(),
        ids.index(cfg.ego),
        _birdview(cfg),
        soft=not cfg.hard,
    )
    save_png(view, cfg.out)
    logger.info("RENDER_COMPLETED", frame=cfg.frame, ego=cfg.ego, agents=len(ids), hard=cfg.hard)
    print(f"rendered frame {cfg.frame} for ego {cfg.ego} -> {cfg.out}")
    return EXIT_OK


def _training_config(cfg: CliConfig, base: TrainingConfig) -> TrainingConfig:
    updates = {
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "clip_norm": cfg.clip_norm,
        "mode": cfg.mode,
        "seed": cfg.seed,
    }
    try:
        return TrainingConfig(**{**base.model_dump(), **updates})
    except ValidationError as exc:
        raise ConfigError(f"invalid training options: {exc.errors()[0]['msg']}")


def _model_config(cfg: CliConfig, base: AgentModelConfig) -> AgentModelConfig:
    try:
        overrides = {"kinematic_mode": cfg.kinematic_mode, "init_seed": cfg.seed}
        return AgentModelConfig(**{**base.model_dump(), **overrides})
    except ValidationError as exc:
        raise ConfigError(f"invalid model options: {exc.errors()[0]['msg']}")


def cmd_train(cfg: CliConfig, logger: JsonLogger) -> int:
    """Train from scratch or from --init and write a checkpoint"""
    loader = get_config_loader()
    scenes = _load_scenes(cfg)
    if not scenes:
        raise ConfigError(f"{cfg.tracks}: no scene with an agent over the observed window")
    if cfg.init:
        model = load_checkpoint(cfg.init)
    else:
        model = CVRNNDriver(_model_config(cfg, loader.load_driver()))
    trainer = Trainer(
        model,
        _training_config(cfg, loader.load_training()),
        _birdview(cfg),
        _logger("trainer", cfg),
        cfg.threads,
    )
    history = trainer.train(scenes)
    checksum = save_checkpoint(model, cfg.checkpoint)
    if cfg.history:
        ReportRepository().save_table(history.records, cfg.history)
    last = history.records[-1]
    logger.info(
        "TRAIN_COMPLETED",
        scenes=len(scenes),
        epochs=len(history.records),
        elbo=last.elbo,
        checksum=checksum,
    )
    print(
        f"trained on {len(scenes)} scenes for {len(history.records)} epochs, "
        f"ELBO {last.elbo:.4f} -> {cfg.checkpoint}"
    )
    return EXIT_OK


def cmd_rollout(cfg: CliConfig, logger: JsonLogger) -> int:
    """Roll out every scene and export all samples"""
    model = load_checkpoint(cfg.checkpoint)
    scenes = _load_scenes(cfg)
    mode = RolloutMode(cfg.mode)
    if mode == RolloutMode.CLASSMATES_FORCING and cfg.ego is None:
        raise ConfigError("rollout: classmates_forcing needs --ego")
    sim_logger = _logger("simulator", cfg)
    results = []
    for scene in scenes:
        ego_index = None
        if mode == RolloutMode.CLASSMATES_FORCING:
            ids = [a.agent_id for a in scene.agents]
            if cfg.ego not in ids or ids.index(cfg.ego) not in active_agents(scene):
                sim_logger.debug(
                    "ROLLOUT_SKIPPED", scene_id=scene.scene_id, reason="ego not observed"
                )
                continue
            ego_index = ids.index(cfg.ego)
        config = RolloutConfig(
            k_samples=cfg.k,
            mode=mode,
            ego_index=ego_index,
            seed=cfg.seed,
            noise_on_states=cfg.noise_on_states,
            threads=cfg.threads,
        )
        results.append(rollout(scene, model, config, _birdview(cfg), sim_logger))
    if mode == RolloutMode.CLASSMATES_FORCING and not results:
        raise EgoNotPresentError(f"track {cfg.ego} is not observed in any scene")
    RolloutRepository().export(results, cfg.out)
    logger.info(
        "ROLLOUT_EXPORTED",
        scenes=len(results),
        k_samples=cfg.k,
        mode=mode.value,
        path=str(cfg.out),
    )
    print(f"rolled out {len(results)} scenes x {cfg.k} samples -> {cfg.out}")
    return EXIT_OK


def cmd_evaluate(cfg: CliConfig, logger: JsonLogger) -> int:
    """Metric report of exported rollouts against ground truth"""
    scenes = _load_scenes(cfg, fit=False)
    try:
        results = RolloutRepository().load(cfg.rollouts)
    except FileNotFoundError:
        raise ConfigError(f"rollout file not found: {cfg.rollouts}")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{cfg.rollouts}: malformed rollout export: {exc}")
    try:
        report = evaluate_rollouts(scenes, results, cfg.k, cfg.variant)
    except KeyError as exc:
        raise ConfigError(f"{cfg.rollouts}: {exc.args[0]}")
    if cfg.out:
        ReportRepository().save_metric_report(report, cfg.out)
    _logger("evaluator", cfg).info(
        "EVALUATION_COMPLETED",
        k=report.k,
        scenes=len(report.scenes),
        agents=len(report.agents),
        min_ade_k=report.min_ade_k,
        min_fde_k=report.min_fde_k,
        mfd_k=report.mfd_k,
    )

    def fmt(v: Optional[float]) -> str:
        return "n/a" if v is None else f"{v:.4f}"

    k = report.k
    print(
        f"minADE_{k} {fmt(report.min_ade_k)}  minFDE_{k} {fmt(report.min_fde_k)}  "
        f"MFD_{k} {fmt(report.mfd_k)}"
    )
    return EXIT_OK


def cmd_gradcheck(cfg: CliConfig, logger: JsonLogger) -> int:
    """Exit 0 only if every suite is within tolerance"""
    results = run_suites([cfg.suite], cfg.points, cfg.seed, logger=_logger("evaluator", cfg))
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(
            f"{r.suite}: max error {r.max_error:.3e} "
            f"(tolerance {r.tolerance:.0e}, {r.points} points) {status}"
        )
    failed = [r.suite for r in results if not r.passed]
    logger.info("GRADCHECK_FINISHED", suites=[r.suite for r in results], failed=failed)
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_synth(cfg: CliConfig, logger: JsonLogger) -> int:
    """Toy scenes written back to back into one track file plus their map"""
    scenes, map_data = synth_dataset(
        cfg.kind, cfg.n_scenes, cfg.seed, cfg.t_obs, cfg.horizon, cfg.dt
    )
    TrackRepository(cfg.dt).write_tracks(scenes, cfg.out_tracks)
    MapRepository().save_map(map_data, cfg.out_map)
    logger.info("SYNTH_COMPLETED", kind=cfg.kind, scenes=len(scenes), seed=cfg.seed)
    print(f"wrote {len(scenes)} {cfg.kind} scenes -> {cfg.out_tracks}, {cfg.out_map}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[CliConfig, JsonLogger], int]] = {
    "fit-kinematics": cmd_fit_kinematics,
    "render": cmd_render,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        Process exit code (0 ok, 2 usage error, 3 runtime error)
    """
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logger = _logger("cli", cfg)
    logger.log_stage("COMMAND_STARTED", command=cfg.command)
    try:
        return COMMANDS[cfg.command](cfg, logger)
    except USAGE_ERRORS as exc:
        logger.error(
            "COMMAND_FAILED", command=cfg.command, error_code=exc.error_code, reason=str(exc)
        )
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        code = getattr(exc, "error_code", type(exc).__name__)
        logger.error("COMMAND_FAILED", command=cfg.command, error_code=code, reason=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
