from __future__ import annotations

import multiprocessing
import os
import sys
from pathlib import Path
from typing import Iterable

import pytest

from evoail import models
from evoail.ail import AILConfig
from evoail.envs import DemoSet
from evoail.envs import ExpertSolution
from evoail.envs import GridWorld
from evoail.envs import NoisyChain
from evoail.envs import collect_demos
from evoail.envs import value_iteration_expert
from evoail.models import DiscSettings
from evoail.models import PPOConfig
from evoail.ra import named_ra

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="function")
def sample_config():
    with open(
        os.path.dirname(os.path.dirname(__file__)) + "/config.sample.toml"
    ) as config:
        yield config.read()


@pytest.fixture(name="config")
def config(tmp_path: Path, sample_config: str) -> Iterable[models.RunConfig]:
    path = tmp_path / "config.toml"
    path.write_text(sample_config)
    yield models.load_config(path)


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def llm_responses_file() -> Path:
    return DATA_DIR / "llm_responses.jsonl"


@pytest.fixture(scope="session")
def grid_env() -> GridWorld:
    return GridWorld(size=5, max_steps=30)


@pytest.fixture(scope="session")
def chain_env() -> NoisyChain:
    return NoisyChain(max_steps=60)


@pytest.fixture(scope="session")
def grid_expert(grid_env: GridWorld) -> ExpertSolution:
    return value_iteration_expert(grid_env)


@pytest.fixture(scope="session")
def grid_demos(grid_env: GridWorld, grid_expert: ExpertSolution) -> DemoSet:
    return collect_demos(grid_env, grid_expert.policy, n_demos=4, stride=2, seed=0)


@pytest.fixture
def tiny_ail_config(grid_env: GridWorld) -> AILConfig:
    """A few iterations of a small PPO learner, seconds per run."""
    return AILConfig(
        env=grid_env,
        ra=named_ra("gail"),
        optimizer="ppo",
        opt=PPOConfig(
            num_envs=2,
            num_steps=32,
            minibatches=2,
            epochs=2,
            hidden_width=16,
            lr=3e-3,
        ),
        disc=DiscSettings(hidden_width=16, minibatches=2),
        iterations=3,
        eval_episodes=4,
        max_eval_points=64,
    )


@pytest.fixture(autouse=True, scope="session")
def setup_multiprocessing_start_method() -> None:
    # On MacOS we have to set the start mode to fork
    # when using multiprocessing-logging
    if sys.platform == "darwin":
        multiprocessing.set_start_method("fork", force=True)
