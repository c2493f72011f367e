"""
Unit tests for track, map, rollout and report repositories.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from SHARED.drive_sdk.errors import MapFormatError, RolloutFormatError, TrackFormatError
from SHARED.drive_sdk.models import RolloutMode, RolloutResult
from SHARED.drive_sdk.repositories import (
    TRACK_COLUMNS,
    MapRepository,
    ReportRepository,
    RolloutRepository,
    TrackRepository,
)
from SHARED.drive_sdk.synth import fork_map
from agents.evaluator.metrics import build_report, evaluate_scene


def _track_rows(track_id, frames, y=0.0, vx=10.0, vy=0.0, agent_type="car"):
    return [
        {
            "track_id": track_id, "frame_id": f, "timestamp_ms": f * 100, "agent_type": agent_type,
            "x": f * 1.0, "y": y, "vx": vx, "vy": vy, "psi_rad": 0.0, "length": 4.5, "width": 1.8,
        }
        for f in frames
    ]


def _write(tmpdir, rows, name="tracks.csv"):
    path = Path(tmpdir) / name
    pd.DataFrame(rows, columns=TRACK_COLUMNS).to_csv(path, index=False)
    return path


def _result(scene_id="s", k=6, agents=3, t_obs=10, horizon=40, seed=0):
    rng = np.random.default_rng(seed)
    return RolloutResult(
        scene_id=scene_id,
        agent_ids=list(range(agents)),
        t_obs=t_obs,
        horizon=horizon,
        states=rng.normal(size=(k, agents, horizon - t_obs, 4)),
        mode=RolloutMode.GENERATIVE,
        seed=seed,
        model_checksum="abc",
    )


class TestTrackRepository:
    """Test track CSV loading"""

    def test_one_full_window(self):
        """Test 40 frames with horizon 40 give exactly one scene"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, _track_rows(1, range(40)) + _track_rows(2, range(40), y=3.5))
            scenes = TrackRepository().load_tracks(path, t_obs=10, horizon=40, stride=10)
        assert len(scenes) == 1
        assert scenes[0].agent_ids == [1, 2]
        assert scenes[0].valid_array().all()

    def test_short_file_masks_last_step(self):
        """Test 39 frames give one scene whose last step is masked"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, _track_rows(1, range(39)))
            scenes = TrackRepository().load_tracks(path, t_obs=10, horizon=40, stride=10)
        assert len(scenes) == 1
        mask = scenes[0].valid_array()[0]
        assert mask[:39].all() and not mask[39]

    def test_sliding_windows(self):
        """Test windows advance by the stride"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, _track_rows(1, range(60)))
            scenes = TrackRepository().load_tracks(path, t_obs=10, horizon=40, stride=10)
        assert [s.scene_id for s in scenes] == ["tracks:0", "tracks:10", "tracks:20"]

    def test_speed_from_velocity(self):
        """Test vx = 3, vy = 4 gives v = 5"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, _track_rows(1, range(5), vx=3.0, vy=4.0))
            scenes = TrackRepository().load_tracks(path, t_obs=2, horizon=5, stride=5)
        np.testing.assert_allclose(scenes[0].states_array()[0, :, 3], 5.0)

    def test_rear_axis_default(self):
        """Test l_r starts at half the length"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, _track_rows(1, range(5)))
            scene = TrackRepository().load_tracks(path, t_obs=2, horizon=5, stride=5)[0]
        assert scene.agents[0].attributes.rear_axis_offset == pytest.approx(2.25)

    def test_empty_file(self):
        """Test an empty file yields no scenes"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "empty.csv"
            path.write_text("")
            assert TrackRepository().load_tracks(path, t_obs=2, horizon=5, stride=1) == []

    def test_bad_value_reports_line(self):
        """Test a malformed number names its line"""
        with tempfile.TemporaryDirectory() as tmpdir:
            rows = _track_rows(1, range(5))
            rows[2]["x"] = "abc"
            path = _write(tmpdir, rows)
            with pytest.raises(TrackFormatError, match="line 4"):
                TrackRepository().load_tracks(path, t_obs=2, horizon=5, stride=1)

    def test_missing_column(self):
        """Test a missing column raises TrackFormatError"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "t.csv"
            pd.DataFrame(_track_rows(1, range(3))).drop(columns=["vy"]).to_csv(path, index=False)
            with pytest.raises(TrackFormatError, match="vy"):
                TrackRepository().load_tracks(path, t_obs=1, horizon=3, stride=1)

    def test_non_monotone_frames(self):
        """Test repeated frame ids raise TrackFormatError"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, _track_rows(1, [0, 1, 1, 2]))
            with pytest.raises(TrackFormatError, match="non-monotone"):
                TrackRepository().load_tracks(path, t_obs=1, horizon=3, stride=1)

    def test_shuffled_frames_rejected(self):
        """Test rows out of frame order within a track raise TrackFormatError"""
        rows = _track_rows(1, range(4))
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, [rows[0], rows[2], rows[1], rows[3]])
            with pytest.raises(TrackFormatError, match="track 1"):
                TrackRepository().load_tracks(path, t_obs=1, horizon=4, stride=4)

    def test_interleaved_tracks_accepted(self):
        """Test tracks may interleave as long as each is in frame order"""
        a, b = _track_rows(1, range(4)), _track_rows(2, range(4), y=3.5)
        rows = [r for pair in zip(a, b) for r in pair]
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, rows)
            scenes = TrackRepository().load_tracks(path, t_obs=1, horizon=4, stride=4)
        assert scenes[0].agent_ids == [1, 2]
        x = scenes[0].agents[1].trajectory.positions()[:, 0]
        np.testing.assert_allclose(x, [0.0, 1.0, 2.0, 3.0])
        assert scenes[0].valid_array().all()

    def test_unknown_agent_type(self):
        """Test unknown agent types raise TrackFormatError"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, _track_rows(1, range(3), agent_type="tank"))
            with pytest.raises(TrackFormatError, match="agent_type"):
                TrackRepository().load_tracks(path, t_obs=1, horizon=3, stride=1)

    def test_missing_file(self):
        """Test a missing file raises TrackFormatError"""
        with pytest.raises(TrackFormatError, match="not found"):
            TrackRepository().load_tracks("/nonexistent/tracks.csv", t_obs=1, horizon=3, stride=1)

    def test_bad_dt(self):
        """Test a non-positive frame period is rejected"""
        with pytest.raises(TrackFormatError):
            TrackRepository(dt=0.0)

    def test_snapshot(self):
        """Test the snapshot holds the agents recorded at one frame"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, _track_rows(4, range(5)) + _track_rows(2, range(3, 8), y=3.5))
            ids, attrs, states = TrackRepository().snapshot(path, 4)
        assert ids == [2, 4]
        assert len(attrs) == 2
        np.testing.assert_allclose(states[:, :2], [[4.0, 3.5], [4.0, 0.0]])

    def test_write_and_reload(self, straight_data):
        """Test written scenes load back with the same positions"""
        scenes, _ = straight_data
        with tempfile.TemporaryDirectory() as tmpdir:
            repo = TrackRepository(dt=scenes[0].dt)
            path = repo.write_tracks(scenes[:1], Path(tmpdir) / "out.csv")
            reloaded = repo.load_tracks(
                path, t_obs=scenes[0].t_obs, horizon=scenes[0].horizon, stride=100
            )
        np.testing.assert_allclose(
            reloaded[0].states_array()[..., :2], scenes[0].states_array()[..., :2], atol=1e-12
        )


class TestMapRepository:
    """Test map loading"""

    def test_round_trip(self):
        """Test a saved map loads back equal"""
        with tempfile.TemporaryDirectory() as tmpdir:
            repo = MapRepository()
            path = repo.save_map(fork_map(), Path(tmpdir) / "map.json")
            assert repo.load_map(path) == fork_map()

    def test_empty_map(self):
        """Test an empty file is an empty map"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "map.json"
            path.write_text("")
            loaded = MapRepository().load_map(path)
        assert loaded.driveable_polygons == [] and loaded.lane_lines == []

    def test_degenerate_polygon(self):
        """Test a two-vertex polygon raises MapFormatError"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "map.json"
            path.write_text(json.dumps({"driveable_polygons": [[[0, 0], [1, 0]]]}))
            with pytest.raises(MapFormatError, match="vertices"):
                MapRepository().load_map(path)

    def test_invalid_json(self):
        """Test syntax errors carry the line number"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "map.json"
            path.write_text('{\n  "lane_lines": [\n')
            with pytest.raises(MapFormatError, match="line"):
                MapRepository().load_map(path)


class TestRolloutRepository:
    """Test rollout export"""

    def test_csv_row_count(self):
        """Test K = 6, three agents and 30 future steps give 540 rows"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = RolloutRepository().export(_result(), Path(tmpdir) / "r.csv")
            frame = pd.read_csv(path, comment="#")
        assert len(frame) == 540
        assert list(frame.columns) == [
            "scene_id", "sample_k", "agent_id", "t", "x", "y", "psi", "v"
        ]
        assert frame["t"].min() == 10 and frame["t"].max() == 39

    def test_csv_metadata(self):
        """Test the header comments carry seed, mode and model checksum"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = RolloutRepository().export(_result(seed=7), Path(tmpdir) / "r.csv")
            text = path.read_text()
        assert "# seed=7" in text
        assert "# mode=generative" in text
        assert "# model_checksum=abc" in text

    def test_empty_export(self):
        """Test no agents gives a header-only file"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = RolloutRepository().export(_result(agents=0), Path(tmpdir) / "r.csv")
            frame = pd.read_csv(path, comment="#")
            reloaded = RolloutRepository().load(path)
        assert len(frame) == 0
        assert reloaded[0].agent_ids == []

    @pytest.mark.parametrize("suffix", ["csv", "json"])
    def test_reload(self, suffix):
        """Test exported states load back exactly"""
        results = [
            _result("a", k=2, agents=2, t_obs=3, horizon=6),
            _result("b", k=2, agents=1, t_obs=3, horizon=6, seed=1),
        ]
        with tempfile.TemporaryDirectory() as tmpdir:
            repo = RolloutRepository()
            loaded = repo.load(repo.export(results, Path(tmpdir) / f"r.{suffix}"))
        assert [r.scene_id for r in loaded] == ["a", "b"]
        for a, b in zip(results, loaded):
            np.testing.assert_array_equal(a.states, b.states)
            assert b.model_checksum == "abc"

    def test_unknown_format(self):
        """Test unsupported formats raise ValueError"""
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(ValueError):
                RolloutRepository().export(_result(), Path(tmpdir) / "r.parquet")

    @pytest.mark.parametrize("scene_id", ["run#1:0", "a,b:0", "k=v:10", "#lead:0"])
    def test_csv_reload_unusual_scene_ids(self, scene_id):
        """Test scene ids with CSV and header punctuation load back exactly"""
        results = [
            _result(scene_id, k=2, agents=1, t_obs=2, horizon=4),
            _result("plain", k=2, agents=1, t_obs=2, horizon=4, seed=1),
        ]
        with tempfile.TemporaryDirectory() as tmpdir:
            repo = RolloutRepository()
            loaded = repo.load(repo.export(results, Path(tmpdir) / "r.csv"))
        assert [r.scene_id for r in loaded] == [scene_id, "plain"]
        for a, b in zip(results, loaded):
            np.testing.assert_array_equal(a.states, b.states)

    def test_csv_malformed_layout(self):
        """Test a broken layout line raises RolloutFormatError"""
        with tempfile.TemporaryDirectory() as tmpdir:
            result = _result(k=1, agents=1, t_obs=2, horizon=4)
            path = RolloutRepository().export(result, Path(tmpdir) / "r.csv")
            text = path.read_text().replace("# layout={", "# layout={oops")
            path.write_text(text)
            with pytest.raises(RolloutFormatError):
                RolloutRepository().load(path)

    def test_csv_missing_column_header(self):
        """Test a file without the column header raises RolloutFormatError"""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "r.csv"
            path.write_text("# seed=1\n")
            with pytest.raises(RolloutFormatError):
                RolloutRepository().load(path)


class TestReportRepository:
    """Test report output"""

    def test_metric_csv_has_all_row(self):
        """Test scene rows are followed by the aggregate"""
        rows = evaluate_scene("s", [0, 1], np.zeros((2, 2, 3, 2)), np.ones((2, 3, 2)))
        report = build_report(rows, k=2)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = ReportRepository().save_metric_report(report, Path(tmpdir) / "m.csv")
            frame = pd.read_csv(path)
        assert list(frame.columns) == ["scene_id", "num_agents", "minADE_2", "minFDE_2", "MFD_2"]
        assert frame["scene_id"].tolist() == ["s", "ALL"]
        assert frame["minFDE_2"].iloc[-1] == pytest.approx(np.sqrt(2.0))

    def test_metric_json(self):
        """Test JSON reports keep the per-agent rows"""
        rows = evaluate_scene("s", [0], np.zeros((1, 1, 3, 2)), np.zeros((1, 3, 2)))
        with tempfile.TemporaryDirectory() as tmpdir:
            report = build_report(rows, k=1)
            path = ReportRepository().save_metric_report(report, Path(tmpdir) / "m.json")
            data = json.loads(path.read_text())
        assert data["k"] == 1 and len(data["agents"]) == 1

    def test_histogram(self):
        """Test histogram rows pair bin edges with counts"""
        with tempfile.TemporaryDirectory() as tmpdir:
            counts, edges = np.array([1, 2]), np.array([0.0, 0.25, 0.5])
            path = ReportRepository().save_histogram(counts, edges, Path(tmpdir) / "h.csv")
            frame = pd.read_csv(path)
        assert frame["count"].tolist() == [1, 2]
        assert frame["bin_hi"].tolist() == [0.25, 0.5]
