"""
Unit tests for the gradient-check suites.
"""

import tempfile
from pathlib import Path

import pytest

from SHARED.drive_sdk.logger import JsonLogger
from agents.evaluator.gradcheck import SUITE_TOLERANCES, SUITES, run_suite, run_suites


class TestRunSuite:
    """Test suite runner"""

    @pytest.mark.parametrize("suite", sorted(SUITES))
    def test_suites_pass(self, suite):
        """Test a few points of every suite are within tolerance"""
        result = run_suite(suite, points=len(SUITES) + 3, seed=1)
        assert result.passed
        assert result.max_error < SUITE_TOLERANCES[suite]
        assert result.worst_point

    def test_seeded(self):
        """Test the same seed reproduces the worst error"""
        a = run_suite("kinematics", points=10, seed=2)
        b = run_suite("kinematics", points=10, seed=2)
        assert a.max_error == b.max_error

    def test_all_expands(self):
        """Test "all" runs every suite in order"""
        results = run_suites(["all"], points=1)
        assert [r.suite for r in results] == list(SUITES)

    def test_logged(self):
        """Test completed suites are logged"""
        with tempfile.TemporaryDirectory() as tmpdir:
            run_suite("kinematics", points=2, logger=JsonLogger("evaluator", tmpdir))
            assert "GRADCHECK_COMPLETED" in (Path(tmpdir) / "evaluator.log.jsonl").read_text()

    def test_unknown_suite(self):
        """Test unknown suite names raise ValueError"""
        with pytest.raises(ValueError):
            run_suite("physics")

    def test_no_points(self):
        """Test zero points raise ValueError"""
        with pytest.raises(ValueError):
            run_suite("kinematics", points=0)
