"""Toy MDPs, value-iteration experts, rollouts and expert demonstrations.

Two environments are provided:

* ``GridWorld``: an N x N grid (``gridN`` ids) with slippery moves, a small
  per-step penalty and a terminal goal. Observations are one-hot cells.
* ``NoisyChain``: a 1-D chain of positions x = 0.05 * k on [0, 1]. The
  observation is (x, noise) with a Gaussian distractor feature. Reward 1 is
  paid whenever x >= 0.95.

Both expose a tabular model (`transition_model`) so experts can be computed
exactly by value iteration. In fixed-length mode an episode never ends
before ``max_steps``; a GridWorld agent that reaches the goal stays there and
keeps collecting the goal reward.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import TYPE_CHECKING
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
from pydantic import BaseModel
from pydantic import Field
from pydantic import ValidationError

from ._types import Policy
from .exceptions import CheckpointError
from .exceptions import DimensionMismatchError
from .exceptions import ExpertFailureError
from .utils import read_jsonl
from .utils import write_jsonl

if TYPE_CHECKING:
    from .models import EnvSettings

GRID_ACTIONS = ("up", "down", "left", "right")
_GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
CHAIN_ACTIONS = ("left", "stay", "right")
_CHAIN_MOVES = (-1, 0, 1)

MAX_EXPERT_ATTEMPTS = 100


@dataclass(frozen=True)
class GridWorld:
    size: int = 7
    start: Tuple[int, int] = (0, 0)
    goal: Optional[Tuple[int, int]] = None
    p_slip: float = 0.1
    step_reward: float = -0.01
    goal_reward: float = 1.0
    gamma: float = 0.99
    max_steps: int = 100
    fixed_length: bool = False
    width: Optional[int] = None
    """Number of columns for rectangular grids, defaults to `size`."""

    def __post_init__(self) -> None:
        if self.goal is None:
            object.__setattr__(self, "goal", (self.size - 1, self.cols - 1))
        if self.size < 1 or self.cols < 1:
            raise ValueError("Grid dimensions must be positive")
        for name, (r, c) in (("start", self.start), ("goal", self.goal)):
            if not (0 <= r < self.size and 0 <= c < self.cols):
                raise ValueError(f"{name} {(r, c)} is outside the grid")
        if tuple(self.start) == tuple(self.goal):
            raise ValueError("start and goal must differ")
        if not 0.0 <= self.p_slip <= 1.0:
            raise ValueError(f"p_slip must be in [0, 1], got {self.p_slip}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def cols(self) -> int:
        return self.width if self.width is not None else self.size

    @property
    def env_id(self) -> str:
        if self.cols == self.size:
            return f"grid{self.size}"
        return f"grid{self.size}x{self.cols}"

    @property
    def n_states(self) -> int:
        return self.size * self.cols

    @property
    def n_actions(self) -> int:
        return len(GRID_ACTIONS)

    @property
    def obs_dim(self) -> int:
        return self.n_states

    @property
    def start_index(self) -> int:
        return self.start[0] * self.cols + self.start[1]

    @property
    def goal_index(self) -> int:
        return self.goal[0] * self.cols + self.goal[1]

    def move(self, index: int, action: int) -> int:
        """Cell reached from `index` by executing `action`. Walls absorb."""
        r, c = divmod(index, self.cols)
        dr, dc = _GRID_MOVES[action]
        r = min(max(r + dr, 0), self.size - 1)
        c = min(max(c + dc, 0), self.cols - 1)
        return r * self.cols + c


@dataclass(frozen=True)
class NoisyChain:
    n_positions: int = 21
    step_size: float = 0.05
    noise_std: float = 0.05
    success_x: float = 0.95
    goal_reward: float = 1.0
    gamma: float = 0.99
    max_steps: int = 200
    fixed_length: bool = True

    def __post_init__(self) -> None:
        if self.n_positions < 2:
            raise ValueError("NoisyChain needs at least 2 positions")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.goal_index >= self.n_positions:
            raise ValueError("success_x is unreachable")

    @property
    def env_id(self) -> str:
        return "chain"

    @property
    def n_states(self) -> int:
        return self.n_positions

    @property
    def n_actions(self) -> int:
        return len(CHAIN_ACTIONS)

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def start_index(self) -> int:
        return 0

    @property
    def goal_index(self) -> int:
        """First position with x >= success_x."""
        return int(math.ceil(self.success_x / self.step_size - 1e-9))

    def position(self, index: int) -> float:
        return min(index * self.step_size, 1.0)

    def move(self, index: int, action: int) -> int:
        return min(max(index + _CHAIN_MOVES[action], 0), self.n_positions - 1)


Env = Union[GridWorld, NoisyChain]


@dataclass(frozen=True, eq=False)
class EnvState:
    index: int
    t: int
    obs: np.ndarray


@dataclass
class Transition:
    state: np.ndarray
    action: int
    env_reward: float
    reward: float
    done: bool
    log_prob: float
    value: float


@dataclass
class Transitions:
    """A batch of consecutive transitions from one environment.

    `rewards` holds the assigned (learner) rewards and stays zero until the
    caller fills it in; `env_rewards` are only used for reporting.
    """

    obs: np.ndarray
    actions: np.ndarray
    env_rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    last_state: Optional[EnvState] = None
    episode_returns: List[float] = field(default_factory=list)
    episode_successes: List[bool] = field(default_factory=list)
    rewards: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = len(self.actions)
        if self.rewards is None:
            self.rewards = np.zeros(n)
        if self.values is None:
            self.values = np.zeros(n)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            state=self.obs[i],
            action=int(self.actions[i]),
            env_reward=float(self.env_rewards[i]),
            reward=float(self.rewards[i]),
            done=bool(self.dones[i]),
            log_prob=float(self.log_probs[i]),
            value=float(self.values[i]),
        )

    def to_list(self) -> List[Transition]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def concatenate(cls, parts: List[Transitions]) -> Transitions:
        return cls(
            obs=np.concatenate([p.obs for p in parts]),
            actions=np.concatenate([p.actions for p in parts]),
            env_rewards=np.concatenate([p.env_rewards for p in parts]),
            dones=np.concatenate([p.dones for p in parts]),
            log_probs=np.concatenate([p.log_probs for p in parts]),
            rewards=np.concatenate([p.rewards for p in parts]),
            values=np.concatenate([p.values for p in parts]),
            episode_returns=[r for p in parts for r in p.episode_returns],
            episode_successes=[s for p in parts for s in p.episode_successes],
        )


def observe(env: Env, index: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(env, GridWorld):
        obs = np.zeros(env.n_states)
        obs[index] = 1.0
        return obs
    return np.array([env.position(index), rng.normal(0.0, env.noise_std)])


def state_index(env: Env, obs: np.ndarray) -> int:
    """Tabular state of an observation."""
    obs = np.asarray(obs)
    if isinstance(env, GridWorld):
        return int(np.argmax(obs))
    return int(round(float(obs[0]) / env.step_size))


def reset(env: Env, rng: np.random.Generator) -> EnvState:
    return EnvState(index=env.start_index, t=0, obs=observe(env, env.start_index, rng))


def step(
    env: Env,
    state: EnvState,
    action: int,
    rng: np.random.Generator,
    fixed_length: Optional[bool] = None,
) -> Tuple[EnvState, float, bool]:
    if not 0 <= int(action) < env.n_actions:
        raise ValueError(
            f"Invalid action {action} for {env.env_id} with {env.n_actions} actions"
        )
    action = int(action)
    if fixed_length is None:
        fixed_length = env.fixed_length
    t = state.t + 1
    truncated = t >= env.max_steps

    if isinstance(env, GridWorld):
        if state.index == env.goal_index:
            # Only reachable in fixed-length mode: the goal is absorbing
            nxt = state.index
        else:
            executed = action
            if env.p_slip > 0 and rng.random() < env.p_slip:
                others = [a for a in range(env.n_actions) if a != action]
                executed = others[rng.integers(len(others))]
            nxt = env.move(state.index, executed)
        at_goal = nxt == env.goal_index
        reward = env.goal_reward if at_goal else env.step_reward
    else:
        nxt = env.move(state.index, action)
        at_goal = nxt >= env.goal_index
        reward = env.goal_reward if at_goal else 0.0

    done = truncated or (at_goal and not fixed_length)
    return EnvState(index=nxt, t=t, obs=observe(env, nxt, rng)), float(reward), done


def rollout(
    env: Env,
    policy: Policy,
    n_steps: int,
    fixed_length: Optional[bool],
    rng: np.random.Generator,
    state: Optional[EnvState] = None,
    until_done: bool = False,
) -> Transitions:
    """Exactly `n_steps` transitions, resetting whenever an episode ends.

    Starts from `state` (continuing an unfinished episode) or from a fresh
    reset. The state after the last step is kept in `last_state`. With
    `until_done` the batch is cut after the first finished episode.
    """
    if state is None:
        state = reset(env, rng)
    obs = np.zeros((n_steps, env.obs_dim))
    actions = np.zeros(n_steps, dtype=np.int64)
    env_rewards = np.zeros(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    log_probs = np.zeros(n_steps)
    returns: List[float] = []
    successes: List[bool] = []
    ep_return = 0.0
    ep_success = False

    for i in range(n_steps):
        action, log_prob = policy.act(state.obs, rng)
        nxt, reward, done = step(env, state, action, rng, fixed_length)
        obs[i] = state.obs
        actions[i] = action
        env_rewards[i] = reward
        dones[i] = done
        log_probs[i] = log_prob
        ep_return += reward
        ep_success = ep_success or _is_success(env, nxt)
        if done:
            returns.append(ep_return)
            successes.append(ep_success)
            ep_return, ep_success = 0.0, False
            if until_done:
                n_steps = i + 1
                state = nxt
                break
            nxt = reset(env, rng)
        state = nxt

    return Transitions(
        obs=obs[:n_steps],
        actions=actions[:n_steps],
        env_rewards=env_rewards[:n_steps],
        dones=dones[:n_steps],
        log_probs=log_probs[:n_steps],
        last_state=state,
        episode_returns=returns,
        episode_successes=successes,
    )


def _is_success(env: Env, state: EnvState) -> bool:
    if isinstance(env, GridWorld):
        return state.index == env.goal_index
    return state.index >= env.goal_index


def run_episode(
    env: Env,
    policy: Policy,
    rng: np.random.Generator,
    fixed_length: Optional[bool] = None,
) -> Transitions:
    """One complete episode from reset."""
    # Episodes are truncated at max_steps, so this always finishes one
    return rollout(env, policy, env.max_steps, fixed_length, rng, until_done=True)


def run_episodes(
    env: Env,
    policy: Policy,
    episodes: int,
    rng: np.random.Generator,
    fixed_length: Optional[bool] = None,
) -> List[Transitions]:
    return [run_episode(env, policy, rng, fixed_length) for _ in range(episodes)]


def evaluate_policy(
    env: Env,
    policy: Policy,
    episodes: int,
    rng: np.random.Generator,
    fixed_length: Optional[bool] = None,
) -> np.ndarray:
    """Undiscounted env return of each episode."""
    return np.array(
        [ep.episode_returns[0] for ep in run_episodes(env, policy, episodes, rng, fixed_length)]
    )


# Policies


class UniformPolicy:
    def __init__(self, n_actions: int) -> None:
        self.n_actions = n_actions

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> Tuple[int, float]:
        return int(rng.integers(self.n_actions)), -math.log(self.n_actions)


class TabularPolicy:
    """Deterministic policy over the tabular states of `env`."""

    def __init__(self, env: Env, actions: np.ndarray) -> None:
        self.env = env
        self.actions = np.asarray(actions, dtype=np.int64)
        self.n_actions = env.n_actions

    def greedy(self, obs: np.ndarray) -> int:
        return int(self.actions[state_index(self.env, obs)])

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> Tuple[int, float]:
        return self.greedy(obs), 0.0


# Tabular model and value iteration


@dataclass
class TabularModel:
    transitions: np.ndarray
    """P[s, a, s']"""
    rewards: np.ndarray
    """R[s, a, s']"""
    terminal: np.ndarray


@dataclass
class ExpertSolution:
    policy: TabularPolicy
    values: np.ndarray
    q_values: np.ndarray
    residual: float
    iterations: int

    @property
    def start_value(self) -> float:
        return float(self.values[self.policy.env.start_index])


def transition_model(env: Env) -> TabularModel:
    S, A = env.n_states, env.n_actions
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    terminal = np.zeros(S, dtype=bool)

    if isinstance(env, GridWorld):
        terminal[env.goal_index] = True
        for s in range(S):
            for a in range(A):
                for executed in range(A):
                    if executed == a:
                        prob = 1.0 - env.p_slip
                    else:
                        prob = env.p_slip / (A - 1)
                    if prob == 0.0:
                        continue
                    nxt = env.move(s, executed)
                    P[s, a, nxt] += prob
        R[:, :, :] = env.step_reward
        R[:, :, env.goal_index] = env.goal_reward
    else:
        terminal[env.goal_index :] = True
        for s in range(S):
            for a in range(A):
                P[s, a, env.move(s, a)] = 1.0
        R[:, :, env.goal_index :] = env.goal_reward
    return TabularModel(transitions=P, rewards=R, terminal=terminal)


def bellman_q(model: TabularModel, values: np.ndarray, gamma: float) -> np.ndarray:
    future = np.where(model.terminal, 0.0, values)
    q = np.einsum("sat,sat->sa", model.transitions, model.rewards + gamma * future)
    q[model.terminal] = 0.0
    return q


def value_iteration_expert(
    env: Env, tol: float = 1e-8, max_iterations: int = 100_000
) -> ExpertSolution:
    """Optimal greedy policy by value iteration. Ties go to the lowest action."""
    model = transition_model(env)
    values = np.zeros(env.n_states)
    residual = np.inf
    iterations = 0
    while residual >= tol and iterations < max_iterations:
        q = bellman_q(model, values, env.gamma)
        new_values = q.max(axis=1)
        residual = float(np.max(np.abs(new_values - values)))
        values = new_values
        iterations += 1
    if residual >= tol:
        logging.warning(
            "Value iteration on %s stopped after %d iterations with residual %g",
            env.env_id,
            iterations,
            residual,
        )
    q = bellman_q(model, values, env.gamma)
    logging.debug(
        "Value iteration on %s converged in %d iterations (residual %g)",
        env.env_id,
        iterations,
        residual,
    )
    return ExpertSolution(
        policy=TabularPolicy(env, np.argmax(q, axis=1)),
        values=values,
        q_values=q,
        residual=residual,
        iterations=iterations,
    )


# Features and occupancy


def one_hot(actions: np.ndarray, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((actions.shape[0], n_actions))
    out[np.arange(actions.shape[0]), actions] = 1.0
    return out


def sa_features(states: np.ndarray, actions: np.ndarray, n_actions: int) -> np.ndarray:
    """State features concatenated with a one-hot action."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] != len(actions):
        raise DimensionMismatchError(
            f"States {states.shape} do not match {len(actions)} actions"
        )
    return np.hstack([states, one_hot(actions, n_actions)])


def occupancy_measure(env: Env, episodes: List[Transitions]) -> np.ndarray:
    """Discounted state-action visitation, (1 - gamma) sum_t gamma^t 1[s_t, a_t], averaged."""
    occupancy = np.zeros((env.n_states, env.n_actions))
    for ep in episodes:
        discounts = env.gamma ** np.arange(len(ep))
        for obs, action, weight in zip(ep.obs, ep.actions, discounts):
            occupancy[state_index(env, obs), action] += weight
    return (1.0 - env.gamma) * occupancy / max(len(episodes), 1)


def discounted_return_estimate(
    env: Env, episodes: List[Transitions], f: Optional[np.ndarray] = None
) -> Tuple[float, float]:
    """Mean and standard error of sum_t gamma^t f(s_t, a_t) over episodes.

    `f` is a (states, actions) table; env rewards are used when omitted.
    """
    totals = []
    for ep in episodes:
        discounts = env.gamma ** np.arange(len(ep))
        if f is None:
            values = ep.env_rewards
        else:
            idx = np.array([state_index(env, o) for o in ep.obs], dtype=np.int64)
            values = f[idx, ep.actions]
        totals.append(float(np.sum(discounts * values)))
    arr = np.array(totals)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), se


# Demonstrations


class DemoHeader(BaseModel):
    kind: str = "header"
    env_id: str
    n_actions: int = Field(ge=1)
    state_dim: int = Field(ge=1)
    stride: int = Field(ge=1)
    n_demos: int = Field(ge=1)
    source_return: float
    seed: int


class DemoRecord(BaseModel):
    state: List[float]
    action: int = Field(ge=0)


@dataclass
class DemoSet:
    states: np.ndarray
    actions: np.ndarray
    meta: DemoHeader

    def __post_init__(self) -> None:
        if len(self.actions) == 0:
            raise ValueError("DemoSet must not be empty")
        if self.states.shape != (len(self.actions), self.meta.state_dim):
            raise DimensionMismatchError(
                f"Demo states {self.states.shape} do not match "
                f"{len(self.actions)} actions of state dim {self.meta.state_dim}"
            )

    def __len__(self) -> int:
        return len(self.actions)

    def features(self) -> np.ndarray:
        return sa_features(self.states, self.actions, self.meta.n_actions)


def collect_demos(
    env: Env,
    expert: Policy,
    n_demos: int = 10,
    stride: int = 20,
    seed: int = 0,
) -> DemoSet:
    """Successful expert episodes, keeping every `stride`-th (s, a) pair.

    Each episode starts subsampling at a random offset below the stride.
    """
    if stride < 1 or n_demos < 1:
        raise ValueError("stride and n_demos must be >= 1")
    rng = np.random.default_rng(seed)
    states: List[np.ndarray] = []
    actions: List[np.ndarray] = []
    returns: List[float] = []
    for demo in range(n_demos):
        for attempt in range(1, MAX_EXPERT_ATTEMPTS + 1):
            episode = run_episode(env, expert, rng)
            if episode.episode_successes and episode.episode_successes[0]:
                break
            logging.debug("Expert episode %d attempt %d failed", demo, attempt)
        else:
            raise ExpertFailureError(
                f"Expert produced no successful episode on {env.env_id} "
                f"in {MAX_EXPERT_ATTEMPTS} attempts"
            )
        offset = int(rng.integers(0, min(stride, len(episode))))
        states.append(episode.obs[offset::stride])
        actions.append(episode.actions[offset::stride])
        returns.append(episode.episode_returns[0])

    demos = DemoSet(
        states=np.concatenate(states),
        actions=np.concatenate(actions),
        meta=DemoHeader(
            env_id=env.env_id,
            n_actions=env.n_actions,
            state_dim=env.obs_dim,
            stride=stride,
            n_demos=n_demos,
            source_return=float(np.mean(returns)),
            seed=seed,
        ),
    )
    logging.info(
        "Collected %d expert pairs from %d episodes on %s (mean return %.4f)",
        len(demos),
        n_demos,
        env.env_id,
        demos.meta.source_return,
    )
    return demos


def save_demos(demos: DemoSet, path: Union[str, Path]) -> None:
    lines = [demos.meta.model_dump_json()]
    for state, action in zip(demos.states, demos.actions):
        lines.append(DemoRecord(state=state.tolist(), action=int(action)).model_dump_json())
    write_jsonl(path, lines)


def load_demos(path: Union[str, Path]) -> DemoSet:
    rows = list(read_jsonl(path))
    if not rows:
        raise CheckpointError(f"Demo file {path} is empty")
    try:
        meta = DemoHeader.model_validate(rows[0])
        records = [DemoRecord.model_validate(row) for row in rows[1:]]
    except ValidationError as e:
        raise CheckpointError(f"Invalid demo file {path}: {e}") from e
    if not records:
        raise CheckpointError(f"Demo file {path} has no (state, action) records")
    return DemoSet(
        states=np.array([r.state for r in records], dtype=np.float64),
        actions=np.array([r.action for r in records], dtype=np.int64),
        meta=meta,
    )


# Construction

_GRID_ID = re.compile(r"grid(\d+)(?:x(\d+))?")


def env_from_id(env_id: str, **overrides) -> Env:
    """'gridN', 'gridNxM' or 'chain', with optional field overrides."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    match = _GRID_ID.fullmatch(env_id)
    if match:
        size = int(match.group(1))
        width = int(match.group(2)) if match.group(2) else None
        return GridWorld(size=size, width=width, **overrides)
    if env_id == "chain":
        return NoisyChain(**overrides)
    raise ValueError(f"Unknown environment {env_id!r}, expected gridN, gridNxM or chain")


def make_env(settings: EnvSettings) -> Env:
    overrides = {
        "gamma": settings.gamma,
        "max_steps": settings.max_steps,
        "fixed_length": settings.fixed_length,
    }
    if settings.id.startswith("grid"):
        overrides["p_slip"] = settings.p_slip
    return env_from_id(settings.id, **overrides)
