"""
Shared fixtures for the simulator test suite.
"""

import os

import numpy as np
import pytest
from hypothesis import settings

from SHARED.drive_sdk.models import AgentAttributes, MapData, Scene, SceneAgent, Trajectory
from SHARED.drive_sdk.synth import synth_dataset

settings.register_profile("diffdrive", deadline=None, max_examples=50)
settings.load_profile("diffdrive")


def pytest_collection_modifyitems(config, items):
    """Skip @pytest.mark.slow unless DIFFDRIVE_RUN_SLOW=1"""
    if os.environ.get("DIFFDRIVE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow acceptance run; set DIFFDRIVE_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def build_scene(
    states,
    t_obs=2,
    dt=0.1,
    masks=None,
    length=4.0,
    width=2.0,
    l_r=1.0,
    map_data=None,
    scene_id="test",
):
    """
    Scene from per-agent (T, 4) state arrays.

    Args:
        states: Sequence of (T, 4) arrays, one per agent
        masks: Optional per-agent validity masks
    """
    agents = []
    for i, arr in enumerate(states):
        mask = None if masks is None else masks[i]
        agents.append(
            SceneAgent(
                agent_id=i,
                attributes=AgentAttributes(length=length, width=width, rear_axis_offset=l_r),
                trajectory=Trajectory.from_array(np.asarray(arr, dtype=np.float64), dt, mask),
            )
        )
    horizon = len(states[0])
    return Scene(
        scene_id=scene_id, agents=agents, map=map_data or MapData(), t_obs=t_obs, horizon=horizon
    )


def straight_states(x0=0.0, y0=0.0, v=10.0, steps=6, dt=0.1):
    """Constant-speed trajectory along +x"""
    t = np.arange(steps) * dt
    return np.column_stack([x0 + v * t, np.full(steps, y0), np.zeros(steps), np.full(steps, v)])


@pytest.fixture
def scene_builder():
    return build_scene


@pytest.fixture
def two_agent_scene():
    """Two cars in parallel lanes, 6 steps, 2 observed"""
    return build_scene([straight_states(0.0, 0.0), straight_states(5.0, 3.5, v=8.0)], t_obs=2)


@pytest.fixture(scope="session")
def straight_data():
    """Small straight-road dataset with short windows"""
    return synth_dataset("straight", 3, seed=0, t_obs=3, horizon=6)


@pytest.fixture
def tiny_model():
    from agents.driver.model import CVRNNDriver
    from agents.evaluator.gradcheck import TINY_AGENT

    return CVRNNDriver(TINY_AGENT)
