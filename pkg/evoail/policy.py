"""Actor-critic policy optimization: PPO with a clipped surrogate, and A2C.

Both optimizers consume advantages from `gae` and share one loss routine.
Actor and critic are separate networks with their own Adam state, and each
network's gradient is clipped to `max_grad_norm` on its own.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy.special import log_softmax

from .envs import Transitions
from .exceptions import NonFiniteSignalError
from .neural import AdamState
from .neural import DenseNet
from .neural import GradBundle
from .neural import adam_step
from .neural import backward
from .neural import forward
from .neural import init_net

if TYPE_CHECKING:
    from .models import A2CConfig
    from .models import PPOConfig

NORM_EPS = 1e-8


@dataclass
class PolicyState:
    actor: DenseNet
    critic: DenseNet
    actor_adam: AdamState
    critic_adam: AdamState

    def __post_init__(self) -> None:
        if self.critic.widths[-1] != 1:
            raise ValueError("Critic must have exactly one output")
        if self.critic.widths[0] != self.actor.widths[0]:
            raise ValueError("Actor and critic must share the observation size")

    @property
    def n_actions(self) -> int:
        return self.actor.widths[-1]

    @property
    def obs_dim(self) -> int:
        return self.actor.widths[0]

    def log_probs(self, obs: np.ndarray) -> np.ndarray:
        out, _ = forward(self.actor, np.atleast_2d(obs))
        return log_softmax(out, axis=1)

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> Tuple[int, float]:
        logp = self.log_probs(obs)[0]
        cdf = np.cumsum(np.exp(logp))
        action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        action = min(action, self.n_actions - 1)
        return action, float(logp[action])


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    loss: float = 0.0


def init_policy(
    obs_dim: int,
    n_actions: int,
    hidden: Sequence[int] = (64, 64),
    lr: float = 2.5e-3,
    seed: Union[int, np.random.SeedSequence] = 0,
) -> PolicyState:
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    actor_seed, critic_seed = seq.spawn(2)
    actor = init_net((obs_dim, *hidden, n_actions), actor_seed)
    critic = init_net((obs_dim, *hidden, 1), critic_seed)
    return PolicyState(
        actor=actor,
        critic=critic,
        actor_adam=AdamState.init(actor, lr),
        critic_adam=AdamState.init(critic, lr),
    )


def value(policy: PolicyState, obs: np.ndarray) -> np.ndarray:
    out, _ = forward(policy.critic, np.atleast_2d(obs))
    return out[:, 0]


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns (advantages + values).

    `dones[t]` marks that the episode ended after step t, so nothing is
    bootstrapped across it.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal lengths")
    advantages = np.zeros_like(rewards)
    last = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        next_value = bootstrap_value if t == len(rewards) - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        advantages[t] = last
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """Zero mean, unit std. Constant batches (all-zero included) map to zeros."""
    std = float(np.std(advantages))
    if std < 1e-12:
        return np.zeros_like(advantages)
    return (advantages - np.mean(advantages)) / (std + NORM_EPS)


def entropy_from_logits(out: np.ndarray) -> np.ndarray:
    logp = log_softmax(out, axis=1)
    return -np.sum(np.exp(logp) * logp, axis=1)


def policy_entropy(policy: PolicyState, states: np.ndarray) -> float:
    """Mean categorical entropy in nats."""
    states = np.atleast_2d(states)
    if len(states) == 0:
        raise ValueError("policy_entropy needs at least one state")
    out, _ = forward(policy.actor, states)
    return float(np.mean(entropy_from_logits(out)))


def surrogate_loss(
    policy: PolicyState,
    obs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    vf_coef: float,
    ent_coef: float,
    clip_eps: Optional[float],
) -> Tuple[float, GradBundle, GradBundle, UpdateStats]:
    """Loss, actor gradients, critic gradients and stats for one minibatch.

    With `clip_eps` the policy term is the clipped PPO surrogate, otherwise
    the plain advantage-weighted log-likelihood used by A2C.
    """
    n = len(actions)
    out, actor_cache = forward(policy.actor, obs)
    logp_all = log_softmax(out, axis=1)
    probs = np.exp(logp_all)
    logp = logp_all[np.arange(n), actions]
    entropy = -np.sum(probs * logp_all, axis=1)

    if clip_eps is None:
        policy_loss = -float(np.mean(advantages * logp))
        d_logp = -advantages / n
        clip_fraction = 0.0
        approx_kl = 0.0
    else:
        log_ratio = logp - old_log_probs
        ratio = np.exp(log_ratio)
        clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
        unclipped_obj = ratio * advantages
        clipped_obj = clipped * advantages
        policy_loss = -float(np.mean(np.minimum(unclipped_obj, clipped_obj)))
        inside = np.abs(ratio - 1.0) <= clip_eps
        active = inside | (unclipped_obj < clipped_obj)
        d_logp = np.where(active, -advantages * ratio / n, 0.0)
        clip_fraction = float(np.mean(~inside))
        approx_kl = float(np.mean((ratio - 1.0) - log_ratio))

    one_hot = np.zeros_like(probs)
    one_hot[np.arange(n), actions] = 1.0
    d_out = d_logp[:, None] * (one_hot - probs)
    # d(-ent_coef * mean H)/dz_j = ent_coef / n * p_j (log p_j + H)
    d_out += ent_coef / n * probs * (logp_all + entropy[:, None])
    actor_grads = backward(policy.actor, actor_cache, d_out)

    values, critic_cache = forward(policy.critic, obs)
    err = values[:, 0] - returns
    value_loss = float(np.mean(err**2))
    critic_grads = backward(policy.critic, critic_cache, (2.0 * vf_coef / n * err)[:, None])

    mean_entropy = float(np.mean(entropy))
    loss = policy_loss + vf_coef * value_loss - ent_coef * mean_entropy
    stats = UpdateStats(
        policy_loss=policy_loss,
        value_loss=value_loss,
        entropy=mean_entropy,
        clip_fraction=clip_fraction,
        approx_kl=approx_kl,
        loss=loss,
    )
    return loss, actor_grads, critic_grads, stats


def _mean_stats(stats: List[UpdateStats]) -> UpdateStats:
    if not stats:
        return UpdateStats()
    return UpdateStats(
        **{
            f.name: float(np.mean([getattr(s, f.name) for s in stats]))
            for f in dataclasses.fields(UpdateStats)
        }
    )


def _run_epochs(
    policy: PolicyState,
    batch: Transitions,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: Union[PPOConfig, A2CConfig],
    rng: np.random.Generator,
    epochs: int,
    clip_eps: Optional[float],
    lr: float,
    iteration: Optional[int],
) -> Tuple[PolicyState, UpdateStats]:
    n = len(batch)
    if n == 0:
        return policy, UpdateStats()
    minibatches = max(1, min(cfg.minibatches, n))
    if n % minibatches:
        logging.debug("Batch of %d does not split evenly into %d minibatches", n, minibatches)

    actor, critic = policy.actor, policy.critic
    actor_adam = policy.actor_adam.with_lr(lr)
    critic_adam = policy.critic_adam.with_lr(lr)
    current = policy
    collected: List[UpdateStats] = []
    for _ in range(epochs):
        for idx in np.array_split(rng.permutation(n), minibatches):
            adv = advantages[idx]
            if cfg.normalize_advantages:
                adv = normalize_advantages(adv)
            loss, actor_grads, critic_grads, stats = surrogate_loss(
                current,
                batch.obs[idx],
                batch.actions[idx],
                batch.log_probs[idx],
                adv,
                returns[idx],
                cfg.vf_coef,
                cfg.ent_coef,
                clip_eps,
            )
            if not np.isfinite(loss):
                raise NonFiniteSignalError("policy loss", iteration)
            actor, actor_adam = adam_step(actor, actor_adam, actor_grads, cfg.max_grad_norm)
            critic, critic_adam = adam_step(
                critic, critic_adam, critic_grads, cfg.max_grad_norm
            )
            current = PolicyState(actor, critic, actor_adam, critic_adam)
            collected.append(stats)
    return current, _mean_stats(collected)


def ppo_update(
    policy: PolicyState,
    batch: Transitions,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PPOConfig,
    rng: np.random.Generator,
    lr: Optional[float] = None,
    iteration: Optional[int] = None,
) -> Tuple[PolicyState, UpdateStats]:
    """`cfg.epochs` passes of Adam steps over shuffled minibatches.

    `lr` overrides the configured learning rate, for annealing.
    """
    return _run_epochs(
        policy,
        batch,
        advantages,
        returns,
        cfg,
        rng,
        epochs=cfg.epochs,
        clip_eps=cfg.clip_eps,
        lr=cfg.lr if lr is None else lr,
        iteration=iteration,
    )


def a2c_update(
    policy: PolicyState,
    batch: Transitions,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: A2CConfig,
    rng: np.random.Generator,
    lr: Optional[float] = None,
    iteration: Optional[int] = None,
) -> Tuple[PolicyState, UpdateStats]:
    """Single pass, unclipped advantage-weighted log-likelihood."""
    return _run_epochs(
        policy,
        batch,
        advantages,
        returns,
        cfg,
        rng,
        epochs=1,
        clip_eps=None,
        lr=cfg.lr if lr is None else lr,
        iteration=iteration,
    )


def annealed_lr(base_lr: float, anneal: bool, iteration: int, total_iterations: int) -> float:
    """Linear decay to zero over the run when `anneal` is set."""
    if not anneal or total_iterations <= 0:
        return base_lr
    return base_lr * (1.0 - iteration / total_iterations)
