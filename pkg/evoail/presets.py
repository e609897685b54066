"""Named configuration presets.

``paper-minatar`` and ``paper-brax`` mirror the published PPO, discriminator,
A2C and evolution hyperparameter tables. ``desk`` keeps their structure but
shrinks the environment count and timestep budget so a run finishes in
seconds to minutes on a laptop.
"""

from __future__ import annotations

import copy
from typing import Any
from typing import Dict

_EVOLUTION = {
    "generations": 10,
    "pairs": 20,
    "candidates_per_pair": 1,
    "topk": 10,
    "eval_seeds": 16,
}

_A2C_MINATAR = {
    "num_envs": 64,
    "num_steps": 16,
    "total_timesteps": 10_000_000,
    "minibatches": 8,
    "gamma": 0.99,
    "gae_lambda": 0.95,
    "vf_coef": 5.0,
    "ent_coef": 0.01,
    "max_grad_norm": 10.0,
    "hidden_width": 64,
    "hidden_layers": 2,
    "activation": "relu",
    "lr": 0.005,
    "anneal_lr": True,
    "optimizer": "adam",
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "paper-minatar": {
        "env": {"fixed_length": False},
        "ppo": {
            "num_envs": 64,
            "num_steps": 128,
            "total_timesteps": 10_000_000,
            "minibatches": 8,
            "epochs": 4,
            "gamma": 0.99,
            "gae_lambda": 0.95,
            "clip_eps": 0.2,
            "vf_coef": 0.5,
            "ent_coef": 0.01,
            "max_grad_norm": 0.5,
            "hidden_width": 64,
            "hidden_layers": 2,
            "activation": "relu",
            "lr": 0.005,
            "anneal_lr": True,
            "optimizer": "adam",
        },
        "disc": {
            "hidden_width": 64,
            "hidden_layers": 1,
            "activation": "relu",
            "lr": 0.0003,
            "gp_weight": 0.1,
            "epochs": 1,
            "minibatches": 8,
            "optimizer": "adam",
        },
        "a2c": _A2C_MINATAR,
        "evolution": _EVOLUTION,
    },
    "paper-brax": {
        "env": {"fixed_length": True},
        "ppo": {
            "num_envs": 2048,
            "num_steps": 10,
            "total_timesteps": 50_000_000,
            "minibatches": 32,
            "epochs": 4,
            "gamma": 0.99,
            "gae_lambda": 0.95,
            "clip_eps": 0.2,
            "vf_coef": 0.5,
            "ent_coef": 0.0,
            "max_grad_norm": 0.5,
            "hidden_width": 256,
            "hidden_layers": 2,
            "activation": "relu",
            "lr": 0.0003,
            "anneal_lr": False,
            "optimizer": "adam",
        },
        "disc": {
            "hidden_width": 128,
            "hidden_layers": 1,
            "activation": "relu",
            "lr": 0.0003,
            "gp_weight": 1.0,
            "epochs": 1,
            "minibatches": 32,
            "optimizer": "adam",
        },
        "a2c": _A2C_MINATAR,
        "evolution": _EVOLUTION,
    },
    "desk": {
        "ppo": {
            "num_envs": 8,
            "num_steps": 128,
            "total_timesteps": 200_000,
            "minibatches": 8,
            "epochs": 4,
            "gamma": 0.99,
            "gae_lambda": 0.95,
            "clip_eps": 0.2,
            "vf_coef": 0.5,
            "ent_coef": 0.01,
            "max_grad_norm": 0.5,
            "hidden_width": 64,
            "hidden_layers": 2,
            "lr": 0.0025,
            "anneal_lr": True,
        },
        "disc": {
            "hidden_width": 64,
            "hidden_layers": 1,
            "lr": 0.001,
            "gp_weight": 0.1,
            "epochs": 1,
            "minibatches": 8,
        },
        "a2c": {
            "num_envs": 8,
            "num_steps": 16,
            "total_timesteps": 200_000,
            "minibatches": 8,
            "vf_coef": 5.0,
            "ent_coef": 0.01,
            "max_grad_norm": 10.0,
            "hidden_width": 64,
            "hidden_layers": 2,
            "lr": 0.005,
            "anneal_lr": True,
        },
        "evolution": {
            "generations": 3,
            "pairs": 4,
            "candidates_per_pair": 1,
            "topk": 4,
            "eval_seeds": 4,
        },
    },
}


def get_preset(name: str) -> Dict[str, Any]:
    """A copy of the preset's config tree."""
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ValueError(
            f"Unknown preset {name!r}, expected one of {', '.join(sorted(PRESETS))}"
        ) from None
