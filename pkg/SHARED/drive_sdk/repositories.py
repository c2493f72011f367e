"""
Data repositories for persistent storage.

Handles reading and writing of track CSVs, map files, rollout exports, model
checkpoints and evaluation reports.
"""

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from .errors import CheckpointError, MapFormatError, RolloutFormatError, TrackFormatError
from .geometry import wrap_angle_array
from .models import (
    AgentAttributes,
    AgentType,
    MapData,
    RolloutMode,
    RolloutResult,
    Scene,
    SceneAgent,
    Trajectory,
)

PathLike = Union[str, Path]

TRACK_COLUMNS = [
    "track_id", "frame_id", "timestamp_ms", "agent_type",
    "x", "y", "vx", "vy", "psi_rad", "length", "width",
]
# INTERACTION spellings plus the enum values written by write_tracks
TRACK_AGENT_TYPES = {
    "car": AgentType.VEHICLE,
    "vehicle": AgentType.VEHICLE,
    "pedestrian/bicycle": AgentType.PEDESTRIAN_BICYCLE,
    "pedestrian_bicycle": AgentType.PEDESTRIAN_BICYCLE,
}
ROLLOUT_COLUMNS = ["scene_id", "sample_k", "agent_id", "t", "x", "y", "psi", "v"]
ROLLOUT_FORMAT = "diffdrive-rollout"
CHECKPOINT_FORMAT = "diffdrive-checkpoint"
FORMAT_VERSION = 1
FLOAT_FORMAT = "%.17g"

# Timestamps are stored in whole milliseconds.
TIMESTAMP_TOLERANCE_MS = 1.0


def _ensure_parent(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create directory for {path}: {exc}")


def parameter_checksum(arrays: Dict[str, np.ndarray]) -> str:
    """SHA-256 over sorted names, shapes and little-endian float64 bytes"""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


class _Track:
    """Rows of one track, sorted by frame"""

    def __init__(self, track_id: int, frame: pd.DataFrame):
        self.track_id = track_id
        self.frames = frame["frame_id"].to_numpy(dtype=np.int64)
        vx = frame["vx"].to_numpy(dtype=np.float64)
        vy = frame["vy"].to_numpy(dtype=np.float64)
        self.states = np.column_stack([
            frame["x"].to_numpy(dtype=np.float64),
            frame["y"].to_numpy(dtype=np.float64),
            wrap_angle_array(frame["psi_rad"].to_numpy(dtype=np.float64)),
            np.hypot(vx, vy),
        ])
        first = frame.iloc[0]
        agent_type = TRACK_AGENT_TYPES.get(str(first["agent_type"]).strip().lower())
        if agent_type is None:
            raise TrackFormatError(f"track {track_id}: unknown agent_type {first['agent_type']!r}")
        length, width = float(first["length"]), float(first["width"])
        try:
            self.attributes = AgentAttributes(
                length=length, width=width, rear_axis_offset=length / 2.0, agent_type=agent_type
            )
        except ValidationError as exc:
            msg = exc.errors()[0]["msg"]
            raise TrackFormatError(f"track {track_id}: invalid dimensions: {msg}")

    def window(self, start: int, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
        """(horizon, 4) states and (horizon,) mask for frames [start, start + horizon)"""
        states = np.zeros((horizon, 4))
        mask = np.zeros(horizon, dtype=bool)
        lo = np.searchsorted(self.frames, start)
        hi = np.searchsorted(self.frames, start + horizon)
        slots = self.frames[lo:hi] - start
        states[slots] = self.states[lo:hi]
        mask[slots] = True
        return states, mask


class TrackRepository:
    """Repository for INTERACTION-style track CSV files"""

    def __init__(self, dt: float = 0.1):
        """
        Initialize track repository.

        Args:
            dt: Frame period in seconds
        """
        if not dt > 0:
            raise TrackFormatError(f"dt must be positive, got {dt}")
        self.dt = dt

    def _read(self, path: PathLike) -> pd.DataFrame:
        path = Path(path)
        try:
            if path.stat().st_size == 0:
                return pd.DataFrame(columns=TRACK_COLUMNS)
            df = pd.read_csv(path, comment="#", float_precision="round_trip")
        except FileNotFoundError:
            raise TrackFormatError(f"track file not found: {path}")
        except pd.errors.EmptyDataError:
            return pd.DataFrame(columns=TRACK_COLUMNS)
        except (pd.errors.ParserError, UnicodeDecodeError) as exc:
            raise TrackFormatError(f"{path}: {exc}")
        df.columns = [str(c).strip() for c in df.columns]
        missing = [c for c in TRACK_COLUMNS if c not in df.columns]
        if missing:
            raise TrackFormatError(f"{path}: missing column {missing[0]!r}")
        numeric = [c for c in TRACK_COLUMNS if c != "agent_type"]
        for col in numeric:
            values = pd.to_numeric(df[col], errors="coerce")
            bad = values.isna()
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise TrackFormatError(
                    f"{path}: line {row + 2}: column {col!r} is not a number: {df[col].iloc[row]!r}"
                )
            df[col] = values
        self._check_frames(df, path)
        return df

    def _check_frames(self, df: pd.DataFrame, path: Path) -> None:
        for track_id, group in df.groupby("track_id", sort=True):
            frames = group["frame_id"].to_numpy()
            if np.any(np.diff(frames) <= 0):
                raise TrackFormatError(f"{path}: track {int(track_id)} has non-monotone frame_id")
            stamps = group["timestamp_ms"].to_numpy(dtype=np.float64)
            expected = np.diff(frames) * self.dt * 1000.0
            if np.any(np.abs(np.diff(stamps) - expected) > TIMESTAMP_TOLERANCE_MS):
                raise TrackFormatError(
                    f"{path}: track {int(track_id)} timestamps are inconsistent with dt={self.dt}"
                )

    def _tracks(self, df: pd.DataFrame) -> List[_Track]:
        # file order; _check_frames requires increasing frame_id per track
        return [_Track(int(tid), group) for tid, group in df.groupby("track_id", sort=True)]

    def load_tracks(
        self,
        path: PathLike,
        t_obs: int,
        horizon: int,
        stride: int,
        map_data: Optional[MapData] = None,
    ) -> List[Scene]:
        """
        Slice a track file into overlapping scenes.

        Windows cover frames [start, start + horizon) and advance by stride
        while they fit inside the file; a shorter file gives one window.
        Agents present in only part of a window are kept with a mask. A window
        is kept if at least one agent is present over its observed steps.

        Args:
            path: Track CSV
            t_obs: Observed steps per scene
            horizon: Steps per scene
            stride: Frames between window starts
            map_data: Map attached to every scene

        Returns:
            Scenes ordered by window start; agents ordered by track_id

        Raises:
            TrackFormatError: On a missing column, malformed value or non-monotone frames
        """
        if stride < 1:
            raise TrackFormatError(f"stride must be positive, got {stride}")
        df = self._read(path)
        if df.empty:
            return []
        tracks = self._tracks(df)
        map_data = map_data or MapData()
        first = int(min(t.frames[0] for t in tracks))
        last = int(max(t.frames[-1] for t in tracks))
        stem = Path(path).stem
        scenes: List[Scene] = []
        starts = list(range(first, last - horizon + 2, stride)) or [first]
        for start in starts:
            agents: List[SceneAgent] = []
            for track in tracks:
                if track.frames[-1] < start or track.frames[0] >= start + horizon:
                    continue
                states, mask = track.window(start, horizon)
                agents.append(SceneAgent(
                    agent_id=track.track_id,
                    attributes=track.attributes,
                    trajectory=Trajectory.from_array(states, self.dt, mask),
                ))
            if not any(a.trajectory.mask_array()[:t_obs].all() for a in agents):
                continue
            scenes.append(Scene(
                scene_id=f"{stem}:{start}",
                agents=agents,
                map=map_data,
                t_obs=t_obs,
                horizon=horizon,
            ))
        return scenes

    def load_track_table(self, path: PathLike) -> Dict[int, Tuple[AgentAttributes, Trajectory]]:
        """Every track over its own frame span, for per-vehicle fitting"""
        df = self._read(path)
        table: Dict[int, Tuple[AgentAttributes, Trajectory]] = {}
        if df.empty:
            return table
        for track in self._tracks(df):
            span = int(track.frames[-1] - track.frames[0] + 1)
            states, mask = track.window(int(track.frames[0]), span)
            table[track.track_id] = (track.attributes, Trajectory.from_array(states, self.dt, mask))
        return table

    def snapshot(
        self, path: PathLike, frame: int
    ) -> Tuple[List[int], List[AgentAttributes], np.ndarray]:
        """
        Agents recorded at one frame.

        Returns:
            (track ids, attributes, (N, 4) states), ordered by track_id
        """
        df = self._read(path)
        ids: List[int] = []
        attributes: List[AgentAttributes] = []
        rows: List[np.ndarray] = []
        if not df.empty:
            for track in self._tracks(df):
                i = int(np.searchsorted(track.frames, frame))
                if i < len(track.frames) and track.frames[i] == frame:
                    ids.append(track.track_id)
                    attributes.append(track.attributes)
                    rows.append(track.states[i])
        states = np.stack(rows) if rows else np.zeros((0, 4))
        return ids, attributes, states

    def write_tracks(self, scenes: Sequence[Scene], path: PathLike) -> Path:
        """
        Write scenes back to back as one track file.

        Scene k occupies frames k*horizon.. and every agent gets a fresh
        track_id. Velocities point along the heading.
        """
        path = Path(path)
        _ensure_parent(path)
        rows: List[Dict[str, Any]] = []
        frame0, next_id = 0, 0
        for scene in scenes:
            for agent in scene.agents:
                arr = agent.trajectory.to_array()
                for t, ok in enumerate(agent.trajectory.valid_mask):
                    if not ok:
                        continue
                    x, y, psi, v = arr[t]
                    frame = frame0 + t
                    rows.append({
                        "track_id": next_id,
                        "frame_id": frame,
                        "timestamp_ms": int(round(frame * self.dt * 1000.0)),
                        "agent_type": agent.attributes.agent_type.value,
                        "x": x,
                        "y": y,
                        "vx": v * math.cos(psi),
                        "vy": v * math.sin(psi),
                        "psi_rad": psi,
                        "length": agent.attributes.length,
                        "width": agent.attributes.width,
                    })
                next_id += 1
            frame0 += scene.horizon
        table = pd.DataFrame(rows, columns=TRACK_COLUMNS)
        table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return path


class MapRepository:
    """Repository for JSON map files"""

    @staticmethod
    def _line_of(text: str, value: Any) -> Optional[int]:
        token = json.dumps(value)
        pos = text.find(token)
        return text.count("\n", 0, pos) + 1 if pos >= 0 else None

    def load_map(self, path: PathLike) -> MapData:
        """
        Load and validate a map.

        Raises:
            MapFormatError: On unreadable JSON, malformed numbers or degenerate polygons
        """
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise MapFormatError(f"map file not found: {path}")
        if not text.strip():
            return MapData()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MapFormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}")
        if not isinstance(raw, dict):
            raise MapFormatError(f"{path}: top level must be an object")
        try:
            return MapData(**raw)
        except ValidationError as exc:
            err = exc.errors()[0]
            where = ".".join(str(p) for p in err["loc"])
            bad_input = err.get("input")
            line = None if isinstance(bad_input, (list, dict)) else self._line_of(text, bad_input)
            context = f"line {line}: " if line else ""
            raise MapFormatError(f"{path}: {context}{where}: {err['msg']}")

    def save_map(self, map_data: MapData, path: PathLike) -> Path:
        path = Path(path)
        _ensure_parent(path)
        with open(path, "w") as f:
            json.dump(map_data.model_dump(mode="json"), f, indent=2)
        return path


class RolloutRepository:
    """Repository for exported rollouts (CSV with a metadata header, or JSON)"""

    @staticmethod
    def _rows(result: RolloutResult) -> Iterable[List[Any]]:
        for k in range(result.k_samples):
            for n, agent_id in enumerate(result.agent_ids):
                for s, t in enumerate(result.steps):
                    x, y, psi, v = result.states[k, n, s]
                    yield [result.scene_id, k, agent_id, t, x, y, psi, v]

    @staticmethod
    def _metadata(results: Sequence[RolloutResult]) -> Dict[str, Any]:
        first = results[0] if results else None
        return {
            "format": ROLLOUT_FORMAT,
            "version": FORMAT_VERSION,
            "seed": first.seed if first else 0,
            "mode": first.mode.value if first else RolloutMode.GENERATIVE.value,
            "model_checksum": first.model_checksum if first else "",
        }

    def export(
        self,
        results: Union[RolloutResult, Sequence[RolloutResult]],
        path: PathLike,
        fmt: Optional[str] = None,
    ) -> Path:
        """
        Write rollouts.

        Args:
            results: One result or several
            path: Output file
            fmt: "csv" or "json" (default: from the file suffix)

        Raises:
            OSError: If the path is not writable
        """
        path = Path(path)
        results = [results] if isinstance(results, RolloutResult) else list(results)
        fmt = (fmt or path.suffix.lstrip(".") or "csv").lower()
        if fmt not in ("csv", "json"):
            raise ValueError(f"unknown rollout format {fmt!r}")
        _ensure_parent(path)
        meta = self._metadata(results)
        if fmt == "json":
            payload = {
                "metadata": meta,
                "scenes": [self._result_json(r) for r in results],
            }
            with open(path, "w") as f:
                json.dump(payload, f, indent=1)
            return path

        with open(path, "w", newline="") as f:
            for key, value in meta.items():
                f.write(f"# {key}={value}\n")
            for r in results:
                layout = {
                    "scene": r.scene_id,
                    "t_obs": r.t_obs,
                    "horizon": r.horizon,
                    "agents": r.agent_ids,
                    "k": r.k_samples,
                }
                f.write(f"# layout={json.dumps(layout)}\n")
            rows = [row for r in results for row in self._rows(r)]
            frame = pd.DataFrame(rows, columns=ROLLOUT_COLUMNS)
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT)
        return path

    @staticmethod
    def _result_json(r: RolloutResult) -> Dict[str, Any]:
        return {
            "scene_id": r.scene_id,
            "agent_ids": r.agent_ids,
            "t_obs": r.t_obs,
            "horizon": r.horizon,
            "k_samples": r.k_samples,
            "mode": r.mode.value,
            "seed": r.seed,
            "model_checksum": r.model_checksum,
            "states": r.states.tolist(),
            "actions": None if r.actions is None else np.asarray(r.actions).tolist(),
            "z": None if r.z is None else np.asarray(r.z).tolist(),
        }

    def load(self, path: PathLike) -> List[RolloutResult]:
        """Read rollouts written by `export`"""
        path = Path(path)
        if path.suffix.lower() == ".json":
            with open(path) as f:
                payload = json.load(f)
            out = []
            for r in payload["scenes"]:
                out.append(RolloutResult(
                    scene_id=r["scene_id"],
                    agent_ids=[int(a) for a in r["agent_ids"]],
                    t_obs=int(r["t_obs"]),
                    horizon=int(r["horizon"]),
                    states=np.asarray(r["states"], dtype=np.float64).reshape(
                        int(r["k_samples"]),
                        len(r["agent_ids"]),
                        int(r["horizon"]) - int(r["t_obs"]),
                        4,
                    ),
                    actions=(
                        None if r["actions"] is None
                        else np.asarray(r["actions"], dtype=np.float64)
                    ),
                    z=None if r["z"] is None else np.asarray(r["z"], dtype=np.float64),
                    mode=RolloutMode(r["mode"]),
                    seed=int(r["seed"]),
                    model_checksum=r["model_checksum"],
                ))
            return out
        return self._load_csv(path)

    def _load_csv(self, path: Path) -> List[RolloutResult]:
        meta: Dict[str, str] = {}
        layout: List[Dict[str, Any]] = []
        column_line = ",".join(ROLLOUT_COLUMNS)
        header_lines = None
        with open(path) as f:
            for i, line in enumerate(f):
                if line.rstrip("\r\n") == column_line:
                    header_lines = i
                    break
                if not line.startswith("#"):
                    raise RolloutFormatError(f"{path}: line {i + 1}: expected a header comment")
                body = line[1:].strip()
                key, sep, value = body.partition("=")
                if not sep:
                    continue
                if key == "layout":
                    try:
                        layout.append(json.loads(value))
                    except json.JSONDecodeError as exc:
                        raise RolloutFormatError(f"{path}: line {i + 1}: malformed layout: {exc}")
                else:
                    meta[key] = value
        if header_lines is None:
            raise RolloutFormatError(f"{path}: missing column header")
        # data rows are read by position; scene ids may contain '#' or ','
        df = pd.read_csv(
            path, skiprows=header_lines, dtype={"scene_id": str}, float_precision="round_trip"
        )
        out = []
        for entry in layout:
            try:
                scene_id = str(entry["scene"])
                agent_ids = [int(a) for a in entry["agents"]]
                t_obs, horizon, k = int(entry["t_obs"]), int(entry["horizon"]), int(entry["k"])
            except (KeyError, TypeError, ValueError) as exc:
                raise RolloutFormatError(f"{path}: incomplete layout entry {entry!r}: {exc}")
            S = horizon - t_obs
            states = np.zeros((k, len(agent_ids), S, 4))
            rows = df[df["scene_id"] == scene_id]
            if len(rows):
                n = rows["agent_id"].map({a: i for i, a in enumerate(agent_ids)}).to_numpy()
                s = rows["t"].to_numpy() - t_obs
                values = rows[["x", "y", "psi", "v"]].to_numpy(dtype=np.float64)
                states[rows["sample_k"].to_numpy(), n, s] = values
            out.append(RolloutResult(
                scene_id=scene_id,
                agent_ids=agent_ids,
                t_obs=t_obs,
                horizon=horizon,
                states=states,
                mode=RolloutMode(meta.get("mode", RolloutMode.GENERATIVE.value)),
                seed=int(meta.get("seed", 0)),
                model_checksum=meta.get("model_checksum", ""),
            ))
        return out


class CheckpointRepository:
    """Repository for model checkpoints (JSON with a parameter checksum)"""

    def save(self, path: PathLike, config: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> str:
        """
        Write config and parameters.

        Returns:
            Checksum of the parameters
        """
        path = Path(path)
        _ensure_parent(path)
        checksum = parameter_checksum(arrays)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": FORMAT_VERSION,
            "config": config,
            "checksum": checksum,
            "parameters": {
                name: {
                    "shape": list(np.shape(arr)),
                    "data": np.asarray(arr, dtype=np.float64).reshape(-1).tolist(),
                }
                for name, arr in sorted(arrays.items())
            },
        }
        with open(path, "w") as f:
            json.dump(payload, f, sort_keys=True)
        return checksum

    def load(self, path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
        """
        Read config and parameters.

        Raises:
            CheckpointError: On a missing file, wrong format or checksum mismatch
        """
        path = Path(path)
        try:
            with open(path) as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint not found: {path}")
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: invalid JSON at line {exc.lineno}")
        if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} v{FORMAT_VERSION} file")
        try:
            arrays = {
                name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
                for name, entry in payload["parameters"].items()
            }
        except (KeyError, ValueError, TypeError) as exc:
            raise CheckpointError(f"{path}: malformed parameters: {exc}")
        if parameter_checksum(arrays) != payload.get("checksum"):
            raise CheckpointError(f"{path}: parameter checksum mismatch")
        return payload.get("config", {}), arrays


class ReportRepository:
    """Repository for metric reports and fitting tables"""

    def save_metric_report(self, report: BaseModel, path: PathLike) -> Path:
        """Per-scene CSV rows plus a final "ALL" row, or the full report as JSON"""
        path = Path(path)
        _ensure_parent(path)
        data = report.model_dump(mode="json")
        if path.suffix.lower() == ".json":
            with open(path, "w") as f:
                json.dump(data, f, indent=2)
            return path
        k = data["k"]
        columns = ["scene_id", "num_agents", f"minADE_{k}", f"minFDE_{k}", f"MFD_{k}"]
        rows = [
            [s["scene_id"], s["num_agents"], s["min_ade_k"], s["min_fde_k"], s["mfd_k"]]
            for s in data["scenes"]
        ]
        rows.append([
            "ALL", len(data["agents"]), data["min_ade_k"], data["min_fde_k"], data["mfd_k"]
        ])
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return path

    def save_table(
        self, rows: Sequence[BaseModel], path: PathLike, columns: Optional[List[str]] = None
    ) -> Path:
        """Rows of a pydantic model as CSV"""
        path = Path(path)
        _ensure_parent(path)
        frame = pd.DataFrame([r.model_dump() for r in rows], columns=columns)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return path

    def save_histogram(self, counts: np.ndarray, edges: np.ndarray, path: PathLike) -> Path:
        path = Path(path)
        _ensure_parent(path)
        frame = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return path
