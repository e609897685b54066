"""Expert-vs-policy discriminator over state-action features.

Expert pairs are the positive class. The logit of a well trained
discriminator estimates log(rho_E / rho_pi), which is what reward assignment
functions consume. The training loss is the mean of the two per-class mean
binary cross-entropies, plus an optional gradient penalty on random
interpolates between expert and policy pairs.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy.special import expit

from .exceptions import DimensionMismatchError
from .exceptions import NonFiniteSignalError
from .neural import AdamState
from .neural import DenseNet
from .neural import GradBundle
from .neural import adam_step
from .neural import backward
from .neural import forward
from .neural import init_net
from .neural import tangent_param_grads
from .ra import softplus

GP_MODES = ("one_centered", "zero_centered")


@dataclass
class DiscState:
    net: DenseNet
    adam: AdamState
    gp_weight: float = 0.1
    minibatches: int = 8
    epochs: int = 1
    gp_mode: str = "one_centered"
    max_grad_norm: Optional[float] = None

    def __post_init__(self) -> None:
        if self.net.widths[-1] != 1:
            raise DimensionMismatchError(
                f"Discriminator needs exactly one output, got {self.net.widths[-1]}"
            )
        if self.gp_weight < 0:
            raise ValueError(f"gp_weight must be >= 0, got {self.gp_weight}")
        if self.gp_mode not in GP_MODES:
            raise ValueError(f"gp_mode must be one of {GP_MODES}, got {self.gp_mode!r}")

    @property
    def input_dim(self) -> int:
        return self.net.widths[0]


def init_disc(
    input_dim: int,
    hidden: Sequence[int] = (64,),
    lr: float = 3e-4,
    seed: int = 0,
    **kwargs,
) -> DiscState:
    net = init_net((input_dim, *hidden, 1), seed)
    return DiscState(net=net, adam=AdamState.init(net, lr), **kwargs)


def _as_batch(disc: DiscState, pairs: np.ndarray) -> np.ndarray:
    x = np.asarray(pairs, dtype=np.float64)
    if x.size == 0:
        return x.reshape(0, disc.input_dim)
    if x.ndim != 2 or x.shape[1] != disc.input_dim:
        raise DimensionMismatchError(
            f"Expected pairs of shape (batch, {disc.input_dim}), got {x.shape}"
        )
    return x


def logits(disc: DiscState, pairs: np.ndarray) -> np.ndarray:
    x = _as_batch(disc, pairs)
    if len(x) == 0:
        return np.zeros(0)
    out, _ = forward(disc.net, x)
    if not np.all(np.isfinite(out)):
        raise NonFiniteSignalError("discriminator logits")
    return out[:, 0]


def disc_loss(disc: DiscState, expert_batch: np.ndarray, policy_batch: np.ndarray) -> float:
    """Mean of the per-class mean binary cross-entropies, without penalty."""
    l_e = logits(disc, expert_batch)
    l_p = logits(disc, policy_batch)
    return 0.5 * (float(np.mean(softplus(-l_e))) + float(np.mean(softplus(l_p))))


def bce_grads(
    disc: DiscState, expert_batch: np.ndarray, policy_batch: np.ndarray
) -> Tuple[GradBundle, float]:
    """Loss and parameter gradients of the negated BCE objective."""
    xe = _as_batch(disc, expert_batch)
    xp = _as_batch(disc, policy_batch)
    if len(xe) == 0 or len(xp) == 0:
        raise ValueError("bce_grads needs nonempty expert and policy batches")
    out, cache = forward(disc.net, np.vstack([xe, xp]))
    l_e, l_p = out[: len(xe), 0], out[len(xe) :, 0]
    loss = 0.5 * (float(np.mean(softplus(-l_e))) + float(np.mean(softplus(l_p))))
    d_out = np.concatenate(
        [
            0.5 / len(xe) * (expit(l_e) - 1.0),
            0.5 / len(xp) * expit(l_p),
        ]
    )[:, None]
    grads = backward(disc.net, cache, d_out)
    grads.inputs = None
    return grads, loss


def gradient_penalty(
    disc: DiscState,
    expert_batch: np.ndarray,
    policy_batch: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[float, GradBundle]:
    """Penalty on input-gradient norms at random expert/policy interpolates.

    One-centered: mean (|grad| - 1)^2. Zero-centered: mean |grad|^2.
    Batches are truncated to the shorter of the two.
    """
    xe = _as_batch(disc, expert_batch)
    xp = _as_batch(disc, policy_batch)
    n = min(len(xe), len(xp))
    if n == 0:
        return 0.0, GradBundle.zeros_like(disc.net)
    u = rng.uniform(size=(n, 1))
    mixed = u * xe[:n] + (1.0 - u) * xp[:n]
    out, cache = forward(disc.net, mixed)
    g = backward(disc.net, cache, np.ones_like(out)).inputs
    norms = np.linalg.norm(g, axis=1)

    if disc.gp_mode == "one_centered":
        penalty = float(np.mean((norms - 1.0) ** 2))
        # d/dg (|g| - 1)^2 = 2 (|g| - 1) g / |g|, taken as 0 at g = 0
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, 2.0 * (norms - 1.0) / safe, 0.0)
    else:
        penalty = float(np.mean(norms**2))
        scale = np.full(n, 2.0)
    directions = (scale / n)[:, None] * g
    return penalty, tangent_param_grads(disc.net, cache, directions)


def train_disc(
    disc: DiscState,
    expert_set: np.ndarray,
    policy_set: np.ndarray,
    rng: np.random.Generator,
    epochs: Optional[int] = None,
    minibatches: Optional[int] = None,
) -> DiscState:
    """Adam steps on shuffled minibatches of both sets.

    `epochs` and `minibatches` default to the values stored on `disc`.
    """
    xe = _as_batch(disc, expert_set)
    xp = _as_batch(disc, policy_set)
    if len(xe) == 0 or len(xp) == 0:
        raise ValueError("train_disc needs nonempty expert and policy sets")
    epochs = disc.epochs if epochs is None else epochs
    minibatches = disc.minibatches if minibatches is None else minibatches
    minibatches = max(1, min(minibatches, len(xe), len(xp)))

    net, adam = disc.net, disc.adam
    current = disc
    for _ in range(epochs):
        e_chunks = np.array_split(rng.permutation(len(xe)), minibatches)
        p_chunks = np.array_split(rng.permutation(len(xp)), minibatches)
        for e_idx, p_idx in zip(e_chunks, p_chunks):
            grads, loss = bce_grads(current, xe[e_idx], xp[p_idx])
            if not np.isfinite(loss):
                raise NonFiniteSignalError("discriminator loss")
            if disc.gp_weight > 0:
                penalty, gp_grads = gradient_penalty(current, xe[e_idx], xp[p_idx], rng)
                if not np.isfinite(penalty):
                    raise NonFiniteSignalError("gradient penalty")
                grads = grads.add(gp_grads, disc.gp_weight)
            net, adam = adam_step(net, adam, grads, disc.max_grad_norm)
            current = dataclasses.replace(current, net=net, adam=adam)
    logging.debug(
        "Discriminator trained %d epochs x %d minibatches, adam step %d",
        epochs,
        minibatches,
        adam.step,
    )
    return current
