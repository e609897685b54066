from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Optional
from typing import Tuple
from typing import Union

import tomli
from pydantic import BaseModel as PydanticBaseModel
from pydantic import Field
from pydantic import field_serializer
from pydantic import field_validator
from pydantic import model_validator
from typing_extensions import Literal

from . import presets
from . import utils
from .exceptions import EvoAILException
from .ra import resolve


class ConfigBaseModel(PydanticBaseModel, extra="ignore"):
    """Base class for all config models. Warns if unknown fields are passed in."""

    @model_validator(mode="before")
    @classmethod
    def _check_unknown_fields(cls, values: Any) -> Any:
        """Checks for unknown fields and logs a warning if any are found.
        Does not log warnings if extra is set to `Extra.allow`.
        """
        if cls.model_config["extra"] == "allow" or not isinstance(values, dict):
            return values
        for key in values:
            if key not in cls.model_fields:
                logging.warning(
                    "%s: Got unknown config field '%s'.",
                    getattr(cls, "__name__", str(cls)),
                    key,
                )
        return values


class GeneralSettings(ConfigBaseModel):
    seed: int = Field(0, ge=0)
    log_level: int = Field(logging.INFO, description="The log level to use.")
    workers: int = Field(
        1,
        description="Number of processes evaluating (candidate, seed) jobs.",
        ge=1,
    )
    output_dir: Path = Path("runs")

    @field_validator("output_dir", mode="after")
    @classmethod
    def _validate_output_dir(cls, v: Path) -> Path:
        if v.exists() and not v.is_dir():
            raise ValueError(f"'output_dir' must be a directory, got file {v}")
        return v

    @field_serializer("log_level")
    def _serialize_log_level(self, v: int) -> str:
        """Serializes the log level as a string.
        Ensures consistent semantics between loading/storing log level in config.
        E.g. we dump `"INFO"` instead of `20`.
        """
        return logging.getLevelName(v)

    @field_validator("log_level", mode="before")
    @classmethod
    def _validate_log_level(cls, v: Any) -> int:
        """Validates the log level and converts it to an integer.
        The log level can be specified as an integer or a string."""
        if isinstance(v, bool):
            raise TypeError("Log level must be an integer or string.")
        if isinstance(v, int):
            if v not in logging._levelToName:
                raise ValueError(
                    f"Invalid log level: {v} is not a valid log level integer."
                )
            return v
        elif isinstance(v, str):
            v = v.upper()
            level_int = logging._nameToLevel.get(v, None)
            if level_int is None:
                raise ValueError(
                    f"Invalid log level: {v} is not a valid log level name."
                )
            return level_int
        else:
            raise TypeError("Log level must be an integer or string.")


class EnvSettings(ConfigBaseModel):
    id: str = Field("grid7", description="'gridN', 'gridNxM' or 'chain'.")
    p_slip: float = Field(0.1, ge=0.0, le=1.0, description="GridWorld only.")
    gamma: float = Field(0.99, ge=0.0, le=1.0)
    max_steps: Optional[int] = Field(
        None, ge=1, description="Episode length, defaults to 100 (grid) or 200 (chain)."
    )
    fixed_length: Optional[bool] = Field(
        None, description="Defaults to off for GridWorld and on for NoisyChain."
    )

    @field_validator("id")
    @classmethod
    def _validate_id(cls, v: str) -> str:
        if not re.fullmatch(r"grid\d+(x\d+)?|chain", v):
            raise ValueError(f"Unknown environment id {v!r}")
        return v


class OptimizerSettings(ConfigBaseModel):
    """Settings shared by PPO and A2C."""

    num_envs: int = Field(8, ge=1)
    num_steps: int = Field(128, ge=1, description="Env steps per env per iteration.")
    total_timesteps: int = Field(200_000, ge=1)
    minibatches: int = Field(8, ge=1)
    gamma: float = Field(0.99, ge=0.0, le=1.0)
    gae_lambda: float = Field(0.95, ge=0.0, le=1.0)
    vf_coef: float = Field(0.5, ge=0.0)
    ent_coef: float = Field(0.01, ge=0.0)
    max_grad_norm: Optional[float] = Field(0.5, gt=0.0)
    hidden_width: int = Field(64, ge=1)
    hidden_layers: int = Field(2, ge=0)
    activation: Literal["relu"] = "relu"
    lr: float = Field(2.5e-3, gt=0.0)
    anneal_lr: bool = True
    optimizer: Literal["adam"] = "adam"
    normalize_advantages: bool = True

    @property
    def hidden(self) -> Tuple[int, ...]:
        return (self.hidden_width,) * self.hidden_layers

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.num_steps

    @property
    def iterations(self) -> int:
        return max(1, self.total_timesteps // self.batch_size)


class PPOConfig(OptimizerSettings):
    clip_eps: float = Field(0.2, gt=0.0)
    epochs: int = Field(4, ge=1)


class A2CConfig(OptimizerSettings):
    num_steps: int = Field(16, ge=1)
    vf_coef: float = Field(5.0, ge=0.0)
    max_grad_norm: Optional[float] = Field(10.0, gt=0.0)
    lr: float = Field(5e-3, gt=0.0)


class DiscSettings(ConfigBaseModel):
    hidden_width: int = Field(64, ge=1)
    hidden_layers: int = Field(1, ge=0)
    activation: Literal["relu"] = "relu"
    lr: float = Field(1e-3, gt=0.0)
    gp_weight: float = Field(0.1, ge=0.0)
    gp_mode: Literal["one_centered", "zero_centered"] = "one_centered"
    epochs: int = Field(1, ge=0)
    minibatches: int = Field(8, ge=1)
    max_grad_norm: Optional[float] = Field(None, gt=0.0)
    optimizer: Literal["adam"] = "adam"

    @property
    def hidden(self) -> Tuple[int, ...]:
        return (self.hidden_width,) * self.hidden_layers


class AILSettings(ConfigBaseModel):
    iterations: Optional[int] = Field(
        None,
        ge=1,
        description="Training iterations. Defaults to the optimizer's timestep budget.",
    )
    eval_episodes: int = Field(16, ge=1)
    max_eval_points: int = Field(512, ge=1)
    n_demos: int = Field(10, ge=1)
    demo_stride: int = Field(20, ge=1)
    baseline_episodes: int = Field(64, ge=1)


class OTSettings(ConfigBaseModel):
    method: Literal["auto", "exact", "sinkhorn"] = "auto"
    eps_scale: float = Field(0.005, gt=0.0, description="Sinkhorn eps / max cost.")
    max_iters: int = Field(10_000, ge=1)
    tol: float = Field(1e-6, gt=0.0)


class LLMSettings(ConfigBaseModel):
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    api_key_env: str = Field(
        "EVOAIL_API_KEY",
        description="Environment variable holding the API key. Keys are never stored in config.",
    )
    temperature: float = Field(1.0, ge=0.0, le=2.0)
    timeout: float = Field(60.0, gt=0.0)
    retries: int = Field(3, ge=0)
    max_concurrency: int = Field(4, ge=1)
    min_interval: float = Field(
        0.0, ge=0.0, description="Minimum seconds between two requests."
    )
    error_tolerance: int = Field(
        5,
        description="Number of failed requests to allow within the last `error_duration` seconds before disabling the endpoint.",
        ge=0,
    )
    error_duration: int = Field(
        300,
        description="The duration in seconds that errors are stored.",
        ge=0,
    )
    disable_duration: int = Field(
        600,
        description="Duration to disable the endpoint for if the error tolerance is exceeded.",
        ge=0,
    )
    mock_responses: Optional[Path] = Field(
        None, description="JSON-lines file of canned responses replayed instead of HTTP."
    )

    @model_validator(mode="after")
    def _validate_error_duration(self) -> "LLMSettings":
        # A single error trips the endpoint, keep it on record long enough to count
        if self.error_tolerance <= 0:
            self.error_duration = max(self.error_duration, 9999)
        return self


class EvoConfig(ConfigBaseModel):
    generations: int = Field(10, ge=0)
    pairs: int = Field(20, ge=1)
    candidates_per_pair: int = Field(1, ge=1)
    topk: int = Field(10, ge=1)
    eval_seeds: int = Field(16, ge=1)
    fallback: bool = Field(
        True, description="Use local mutation when the endpoint yields no candidate."
    )
    local_only: bool = Field(False, description="Never contact the endpoint.")
    worst_fitness_factor: float = Field(
        10.0, gt=0.0, description="Failed runs score -factor * random-policy W2."
    )

    @model_validator(mode="after")
    def _validate_offspring(self) -> "EvoConfig":
        if self.pairs * self.candidates_per_pair < 1:
            raise ValueError("pairs * candidates_per_pair must be >= 1")
        return self


class RunConfig(ConfigBaseModel):
    evoail: GeneralSettings = GeneralSettings()
    env: EnvSettings = EnvSettings()
    ra: str = "dail"
    optimizer: Literal["ppo", "a2c"] = "ppo"
    ppo: PPOConfig = PPOConfig()
    a2c: A2CConfig = A2CConfig()
    disc: DiscSettings = DiscSettings()
    ail: AILSettings = AILSettings()
    ot: OTSettings = OTSettings()
    evolution: EvoConfig = EvoConfig()
    llm: LLMSettings = LLMSettings()

    @field_validator("ra")
    @classmethod
    def _validate_ra(cls, v: str) -> str:
        try:
            resolve(v)
        except EvoAILException as e:
            raise ValueError(str(e)) from e
        return v

    @property
    def optimizer_config(self) -> Union[PPOConfig, A2CConfig]:
        return self.ppo if self.optimizer == "ppo" else self.a2c


def load_config_data(
    path: Optional[Union[str, Path]] = None, preset: Optional[str] = None
) -> Dict[str, Any]:
    """Raw config tree: the preset with the file merged on top."""
    file_data: Dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as f:
            file_data = tomli.load(f)
        file_data = utils.expand_env_vars(file_data)
    preset = preset or file_data.pop("preset", None)
    file_data.pop("preset", None)
    base = presets.get_preset(preset) if preset else {}
    return utils.deep_merge(base, file_data)


def load_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Validated config: preset, then the file, then `overrides` on top."""
    data = load_config_data(path, preset)
    if overrides:
        data = utils.deep_merge(data, overrides)
    return RunConfig.model_validate(data)
