"""Adversarial imitation learning through a reward assignment function.

Every iteration runs, in order: a rollout in each environment copy, one
discriminator update on the demonstrations against that fresh rollout,
reward assignment from the updated discriminator's logits, GAE, and a policy
update. The learner only ever sees assigned rewards. After the last
iteration the policy is evaluated and compared with the demonstrations by
the Wasserstein-2 distance between their state-action samples.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections import deque
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Deque
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
from pydantic import BaseModel

from ._types import Policy
from .discriminator import DiscState
from .discriminator import disc_loss
from .discriminator import init_disc
from .discriminator import logits
from .discriminator import train_disc
from .envs import DemoSet
from .envs import Env
from .envs import EnvState
from .envs import Transitions
from .envs import UniformPolicy
from .envs import evaluate_policy
from .envs import make_env
from .envs import rollout
from .envs import run_episodes
from .envs import sa_features
from .exceptions import DegenerateBaselineError
from .exceptions import DimensionMismatchError
from .exceptions import NonFiniteSignalError
from .models import A2CConfig
from .models import DiscSettings
from .models import OTSettings
from .models import PPOConfig
from .models import RunConfig
from .ot import equalize
from .ot import subsample
from .ot import wasserstein
from .policy import PolicyState
from .policy import a2c_update
from .policy import annealed_lr
from .policy import gae
from .policy import init_policy
from .policy import policy_entropy
from .policy import ppo_update
from .policy import value
from .ra import RAFunction
from .ra import eval_ra
from .ra import resolve

RETURN_WINDOW = 100


@dataclass
class AILConfig:
    env: Env
    ra: Optional[RAFunction]
    optimizer: str = "ppo"
    opt: Union[PPOConfig, A2CConfig] = field(default_factory=PPOConfig)
    disc: DiscSettings = field(default_factory=DiscSettings)
    iterations: int = 1
    eval_episodes: int = 16
    max_eval_points: int = 512
    fixed_length: Optional[bool] = None
    ot: OTSettings = field(default_factory=OTSettings)
    policy_updates: bool = True
    """Off freezes the policy at its initialization (for baselines and ablations)."""

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.optimizer not in ("ppo", "a2c"):
            raise ValueError(f"Unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_run_config(
        cls, config: RunConfig, ra: Optional[RAFunction] = None
    ) -> AILConfig:
        opt = config.optimizer_config
        return cls(
            env=make_env(config.env),
            ra=ra if ra is not None else resolve(config.ra),
            optimizer=config.optimizer,
            opt=opt,
            disc=config.disc,
            iterations=config.ail.iterations or opt.iterations,
            eval_episodes=config.ail.eval_episodes,
            max_eval_points=config.ail.max_eval_points,
            fixed_length=config.env.fixed_length,
            ot=config.ot,
        )


@dataclass
class IterationMetrics:
    iteration: int
    env_steps: int
    mean_return: float
    success_rate: float
    entropy: float
    disc_loss: float
    policy_loss: float
    value_loss: float
    clip_fraction: float
    approx_kl: float
    reward_mean: float
    reward_min: float
    reward_max: float
    logit_mean: float
    logit_std: float
    logit_q05: float
    logit_q50: float
    logit_q95: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in dataclasses.asdict(self).values())


@dataclass
class AILResult:
    policy: PolicyState
    disc: Optional[DiscState]
    wasserstein: Optional[float]
    eval_returns: np.ndarray
    metrics: List[IterationMetrics]
    log_ratios: np.ndarray
    """Discriminator logits on the final training rollout."""
    elapsed: float = 0.0

    @property
    def eval_return(self) -> float:
        return float(np.mean(self.eval_returns))


class RunRecord(BaseModel):
    """Persisted form of an AILResult, without network parameters."""

    env_id: str
    ra: str
    dsl: str
    optimizer: str
    seed: int
    iterations: int
    wasserstein: Optional[float]
    eval_return: float
    eval_returns: List[float]
    normalized_return: Optional[float] = None
    elapsed: float
    metrics: List[Dict[str, float]]
    log_ratios: List[float]
    config: Dict[str, Any] = {}


def assign_rewards(ra: RAFunction, logit_batch: np.ndarray) -> np.ndarray:
    return eval_ra(ra, logit_batch)


def normalized_return(ret: float, random_ret: float, expert_ret: float) -> float:
    """Min-max scaling between random and expert performance. Not clipped."""
    if expert_ret == random_ret:
        raise DegenerateBaselineError(
            f"Expert and random baselines are both {expert_ret}, cannot normalize"
        )
    return (ret - random_ret) / (expert_ret - random_ret)


@dataclass
class Baselines:
    random_return: float
    expert_return: float

    def normalize(self, ret: float) -> float:
        return normalized_return(ret, self.random_return, self.expert_return)


def policy_baselines(env: Env, expert: Policy, episodes: int, seed: int) -> Baselines:
    """Monte-Carlo mean returns of the uniform-random and the expert policy."""
    random_rng, expert_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return Baselines(
        random_return=float(
            np.mean(evaluate_policy(env, UniformPolicy(env.n_actions), episodes, random_rng))
        ),
        expert_return=float(np.mean(evaluate_policy(env, expert, episodes, expert_rng))),
    )


def policy_wasserstein(
    env: Env,
    policy: Policy,
    demos: DemoSet,
    rng: np.random.Generator,
    episodes: int = 16,
    max_points: int = 512,
    fixed_length: Optional[bool] = None,
    ot_settings: Optional[OTSettings] = None,
) -> Tuple[float, np.ndarray]:
    """W2 between pooled evaluation (s, a) pairs of `policy` and the demos.

    Returns (distance, evaluation returns).
    """
    ot_settings = ot_settings or OTSettings()
    eps = run_episodes(env, policy, episodes, rng, fixed_length)
    batch = Transitions.concatenate(eps)
    samples = subsample(sa_features(batch.obs, batch.actions, env.n_actions), max_points, rng)
    demo_samples = subsample(demos.features(), max_points, rng)
    a, b = equalize(samples, demo_samples)
    distance, _ = wasserstein(
        a,
        b,
        method=ot_settings.method,
        eps_scale=ot_settings.eps_scale,
        max_iters=ot_settings.max_iters,
        tol=ot_settings.tol,
    )
    return distance, np.array(batch.episode_returns)


def _check_demos(env: Env, demos: DemoSet) -> None:
    if demos.meta.state_dim != env.obs_dim or demos.meta.n_actions != env.n_actions:
        raise DimensionMismatchError(
            f"Demos from {demos.meta.env_id} (state dim {demos.meta.state_dim}, "
            f"{demos.meta.n_actions} actions) do not match {env.env_id} "
            f"(state dim {env.obs_dim}, {env.n_actions} actions)"
        )


def _train(
    cfg: AILConfig, demos: Optional[DemoSet], seed: int, use_disc: bool
) -> AILResult:
    env = cfg.env
    opt = cfg.opt
    start = time.monotonic()
    policy_seed, disc_seed, env_seed, train_seed, eval_seed = np.random.SeedSequence(
        seed
    ).spawn(5)

    policy = init_policy(env.obs_dim, env.n_actions, opt.hidden, opt.lr, policy_seed)
    disc: Optional[DiscState] = None
    expert_feats: Optional[np.ndarray] = None
    if demos is not None:
        _check_demos(env, demos)
    if use_disc:
        disc = init_disc(
            env.obs_dim + env.n_actions,
            hidden=cfg.disc.hidden,
            lr=cfg.disc.lr,
            seed=int(disc_seed.generate_state(1)[0]),
            gp_weight=cfg.disc.gp_weight,
            minibatches=cfg.disc.minibatches,
            epochs=cfg.disc.epochs,
            gp_mode=cfg.disc.gp_mode,
            max_grad_norm=cfg.disc.max_grad_norm,
        )
        expert_feats = demos.features()

    env_rngs = [np.random.default_rng(s) for s in env_seed.spawn(opt.num_envs)]
    rng = np.random.default_rng(train_seed)
    states: List[Optional[EnvState]] = [None] * opt.num_envs
    recent_returns: Deque[float] = deque(maxlen=RETURN_WINDOW)
    recent_successes: Deque[bool] = deque(maxlen=RETURN_WINDOW)
    metrics: List[IterationMetrics] = []
    update = ppo_update if cfg.optimizer == "ppo" else a2c_update
    log_ratios = np.zeros(0)

    for i in range(cfg.iterations):
        parts = []
        for k in range(opt.num_envs):
            part = rollout(env, policy, opt.num_steps, cfg.fixed_length, env_rngs[k], states[k])
            states[k] = part.last_state
            parts.append(part)
        features = [sa_features(p.obs, p.actions, env.n_actions) for p in parts]

        loss = 0.0
        if use_disc:
            policy_feats = np.vstack(features)
            disc = train_disc(disc, expert_feats, policy_feats, rng)
            loss = disc_loss(disc, expert_feats, policy_feats)
            batch_logits = []
            for part, feats in zip(parts, features):
                part_logits = logits(disc, feats)
                part.rewards = assign_rewards(cfg.ra, part_logits)
                batch_logits.append(part_logits)
            log_ratios = np.concatenate(batch_logits)
        else:
            for part in parts:
                part.rewards = part.env_rewards.copy()

        advantages, returns = [], []
        for part in parts:
            if not np.all(np.isfinite(part.rewards)):
                raise NonFiniteSignalError("assigned reward", i)
            part.values = value(policy, part.obs)
            bootstrap = float(value(policy, part.last_state.obs)[0])
            adv, ret = gae(part.rewards, part.values, part.dones, bootstrap, opt.gamma, opt.gae_lambda)
            advantages.append(adv)
            returns.append(ret)
        batch = Transitions.concatenate(parts)
        advantages = np.concatenate(advantages)
        returns = np.concatenate(returns)
        if not (np.all(np.isfinite(advantages)) and np.all(np.isfinite(returns))):
            raise NonFiniteSignalError("advantage", i)

        entropy = policy_entropy(policy, batch.obs)
        stats = None
        if cfg.policy_updates:
            lr = annealed_lr(opt.lr, opt.anneal_lr, i, cfg.iterations)
            policy, stats = update(policy, batch, advantages, returns, opt, rng, lr=lr, iteration=i)

        recent_returns.extend(batch.episode_returns)
        recent_successes.extend(batch.episode_successes)
        logit_summary = log_ratios if len(log_ratios) else np.zeros(1)
        record = IterationMetrics(
            iteration=i,
            env_steps=(i + 1) * opt.batch_size,
            mean_return=float(np.mean(recent_returns)) if recent_returns else 0.0,
            success_rate=float(np.mean(recent_successes)) if recent_successes else 0.0,
            entropy=entropy,
            disc_loss=loss,
            policy_loss=stats.policy_loss if stats else 0.0,
            value_loss=stats.value_loss if stats else 0.0,
            clip_fraction=stats.clip_fraction if stats else 0.0,
            approx_kl=stats.approx_kl if stats else 0.0,
            reward_mean=float(np.mean(batch.rewards)),
            reward_min=float(np.min(batch.rewards)),
            reward_max=float(np.max(batch.rewards)),
            logit_mean=float(np.mean(logit_summary)),
            logit_std=float(np.std(logit_summary)),
            logit_q05=float(np.quantile(logit_summary, 0.05)),
            logit_q50=float(np.quantile(logit_summary, 0.5)),
            logit_q95=float(np.quantile(logit_summary, 0.95)),
        )
        if not record.is_finite():
            raise NonFiniteSignalError("training metrics", i)
        metrics.append(record)
        logging.debug(
            "Iteration %d/%d: return %.4f entropy %.4f disc loss %.4f reward mean %.4f",
            i + 1,
            cfg.iterations,
            record.mean_return,
            record.entropy,
            record.disc_loss,
            record.reward_mean,
        )

    eval_rng = np.random.default_rng(eval_seed)
    distance: Optional[float] = None
    if demos is not None:
        distance, eval_returns = policy_wasserstein(
            env,
            policy,
            demos,
            eval_rng,
            episodes=cfg.eval_episodes,
            max_points=cfg.max_eval_points,
            fixed_length=cfg.fixed_length,
            ot_settings=cfg.ot,
        )
    else:
        eval_returns = evaluate_policy(env, policy, cfg.eval_episodes, eval_rng, cfg.fixed_length)

    return AILResult(
        policy=policy,
        disc=disc,
        wasserstein=distance,
        eval_returns=np.asarray(eval_returns),
        metrics=metrics,
        log_ratios=log_ratios,
        elapsed=time.monotonic() - start,
    )


def run_fail(cfg: AILConfig, demos: DemoSet, seed: int) -> AILResult:
    """Imitation run with the reward assignment function `cfg.ra`."""
    if cfg.ra is None:
        raise ValueError("run_fail needs a reward assignment function")
    result = _train(cfg, demos, seed, use_disc=True)
    logging.info(
        "Run %s on %s seed %d: W2 %.6f, eval return %.4f (%d iterations, %.1fs)",
        cfg.ra.name,
        cfg.env.env_id,
        seed,
        result.wasserstein,
        result.eval_return,
        cfg.iterations,
        result.elapsed,
    )
    return result


def run_rl(cfg: AILConfig, seed: int, demos: Optional[DemoSet] = None) -> AILResult:
    """The same training loop on simulator rewards, without a discriminator.

    With `demos` the final policy is also scored by W2.
    """
    result = _train(cfg, demos, seed, use_disc=False)
    logging.info(
        "RL run on %s seed %d: eval return %.4f (%d iterations, %.1fs)",
        cfg.env.env_id,
        seed,
        result.eval_return,
        cfg.iterations,
        result.elapsed,
    )
    return result


def result_record(
    cfg: AILConfig,
    result: AILResult,
    seed: int,
    baselines: Optional[Baselines] = None,
    config: Optional[Dict[str, Any]] = None,
) -> RunRecord:
    normalized = None
    if baselines is not None:
        try:
            normalized = baselines.normalize(result.eval_return)
        except DegenerateBaselineError as e:
            logging.warning("Not normalizing return: %s", e)
    return RunRecord(
        env_id=cfg.env.env_id,
        ra=cfg.ra.name if cfg.ra is not None else "env",
        dsl=cfg.ra.dsl if cfg.ra is not None else "",
        optimizer=cfg.optimizer,
        seed=seed,
        iterations=cfg.iterations,
        wasserstein=result.wasserstein,
        eval_return=result.eval_return,
        eval_returns=[float(r) for r in result.eval_returns],
        normalized_return=normalized,
        elapsed=result.elapsed,
        metrics=[dataclasses.asdict(m) for m in result.metrics],
        log_ratios=[float(x) for x in result.log_ratios],
        config=config or {},
    )
