import copy
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .constants import (
    DISCRIMINATOR_DOMAINS,
    FULL_SCALE_CONTENT_LAYERS,
    FULL_SCALE_DENOISER_LAYERS,
    FULL_SCALE_HIDDEN_CHANNELS,
    FULL_SCALE_T_PRIME,
    FULL_SCALE_TIMESTEPS,
    LAMBDA_DIST,
    LAMBDA_FM,
    LAMBDA_INV_DIST,
    TRAINING_MODES,
)
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

# Default constants
DEFAULT_CONFIG_NAME = "onestepvc.yaml"
DEFAULT_RUNS_DIR = "runs"
ENV_PREFIX = "ONESTEPVC_"


@dataclass(frozen=True)
class MelConfig:
    """Log-mel feature definition shared by extraction, training and vocoding."""

    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 256
    win: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5
    filterbank: str = "slaney"

    @property
    def f_max(self) -> float:
        return self.fmax if self.fmax is not None else self.sample_rate / 2


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = FULL_SCALE_TIMESTEPS
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"


@dataclass(frozen=True)
class NetworkConfig:
    """Sizes of every network; defaults are the full-scale architecture."""

    denoiser_layers: int = FULL_SCALE_DENOISER_LAYERS
    hidden_channels: int = FULL_SCALE_HIDDEN_CHANNELS
    downsample_stages: int = 2
    kernel_size: int = 5
    time_embedding_dim: int = 128
    speaker_dim: int = 256
    content_dim: int = 256
    content_layers: int = FULL_SCALE_CONTENT_LAYERS
    content_hidden: int = FULL_SCALE_HIDDEN_CHANNELS
    teacher_content_layers: int = 4
    teacher_content_hidden: int = FULL_SCALE_HIDDEN_CHANNELS
    discriminator_domain: str = "mel"
    discriminator_channels: int = 32
    periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    resolutions: tuple[tuple[int, int, int], ...] = (
        (1024, 120, 600),
        (2048, 240, 1200),
        (512, 50, 240),
    )
    mel_scales: tuple[int, ...] = (1, 2, 4)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator objective terms."""

    lambda_fm: float = LAMBDA_FM
    lambda_dist: float = LAMBDA_DIST
    lambda_inv_dist: float = LAMBDA_INV_DIST

    def __post_init__(self):
        for name in ("lambda_fm", "lambda_dist", "lambda_inv_dist"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "adcd"
    batch_size: int = 32
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    epochs: int = 100
    steps: int = 0
    t_prime: int = FULL_SCALE_T_PRIME
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    segment_frames: int = 64
    content_pretrain_steps: int = 2000
    speaker_embedder_steps: int = 500
    use_reconversion: bool = True
    use_inverse: bool = True
    trainable_content: bool = False
    align_weight: float = 1.0
    strict_conditioning: bool = False
    log_every: int = 1
    checkpoint_every: int = 0


@dataclass(frozen=True)
class EvalConfig:
    rtf_repetitions: int = 30
    rtf_warmup: int = 5
    judge_command: str | None = None
    eval_seed: int = 1234


SECTIONS = {
    "mel": MelConfig,
    "diffusion": DiffusionConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def flat_fields() -> dict[str, tuple[str, Any]]:
    """Map every flat config key to its (section, default value).

    Loss weights are flattened into the train section.
    """
    fields: dict[str, tuple[str, Any]] = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name == "weights":
                for wf in dataclasses.fields(LossWeights):
                    fields[wf.name] = (section, wf.default)
                continue
            default = f.default if f.default is not dataclasses.MISSING else None
            fields[f.name] = (section, default)
    return fields


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Convert a YAML/env value to the type of the field default."""
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or key in ("fmax",):
            return float(value)
        if isinstance(default, tuple):
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
        return value
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid value for '{key}': {value!r}") from e


class OneStepVCConfig:
    """Configuration loader for onestepvc.

    Values come from code defaults, then ``ONESTEPVC_<KEY>`` environment
    variables, then a flat YAML file, then explicit overrides (CLI flags).
    """

    def __init__(
        self,
        root_path: Path | None = None,
        config_path: Path | None = None,
        overrides: dict[str, Any] | None = None,
    ):
        self.root_path = root_path or Path.cwd()
        self.debug = os.getenv(f"{ENV_PREFIX}DEBUG", "false").lower() == "true"
        self.runs_dir_name = os.getenv(f"{ENV_PREFIX}RUNS_DIR", DEFAULT_RUNS_DIR)

        self._values: dict[str, Any] = {
            key: default for key, (_, default) in flat_fields().items()
        }
        self._load_from_env()

        # Load from YAML if exists
        self.config_path = config_path or self.root_path / DEFAULT_CONFIG_NAME
        if self.config_path.exists():
            self._load_from_yaml(self.config_path)
        elif config_path is not None:
            raise ConfigurationError(f"Config file not found: {config_path}")

        if overrides:
            self.update(overrides)

    def _load_from_env(self):
        for key, (_, default) in flat_fields().items():
            raw = os.getenv(f"{ENV_PREFIX}{key.upper()}")
            if raw is not None:
                self._values[key] = _coerce(key, yaml.safe_load(raw), default)

    def _load_from_yaml(self, path: Path):
        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Failed to parse config {path}: {e}") from e
        if not data:
            return
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config {path} must be a flat mapping")
        self.debug = bool(data.pop("debug", self.debug))
        self.runs_dir_name = data.pop("runs_dir_name", self.runs_dir_name)
        self.update(data)
        logger.debug(f"Loaded config from {path}")

    def update(self, values: dict[str, Any]) -> None:
        """Apply flat key overrides; unknown keys are rejected."""
        known = flat_fields()
        for key, value in values.items():
            if key not in known:
                raise ConfigurationError(f"Unknown config key: '{key}'")
            self._values[key] = _coerce(key, value, known[key][1])

    def derive(self, overrides: dict[str, Any]) -> "OneStepVCConfig":
        """Copy of this config with flat key overrides applied."""
        clone = copy.copy(self)
        clone._values = dict(self._values)
        clone.update(overrides)
        return clone

    def _section(self, name: str):
        cls = SECTIONS[name]
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name == "weights":
                kwargs["weights"] = LossWeights(
                    **{
                        wf.name: self._values[wf.name]
                        for wf in dataclasses.fields(LossWeights)
                    }
                )
            else:
                kwargs[f.name] = self._values[f.name]
        return cls(**kwargs)

    @property
    def mel(self) -> MelConfig:
        return self._section("mel")

    @property
    def diffusion(self) -> DiffusionConfig:
        return self._section("diffusion")

    @property
    def network(self) -> NetworkConfig:
        return self._section("network")

    @property
    def train(self) -> TrainConfig:
        return self._section("train")

    @property
    def eval(self) -> EvalConfig:
        return self._section("eval")

    @property
    def runs_root(self) -> Path:
        """Absolute path to the directory holding run directories."""
        return (self.root_path / self.runs_dir_name).resolve()

    def snapshot(self) -> dict[str, Any]:
        """Flat key -> value mapping, as persisted into run directories."""
        return {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in sorted(self._values.items())
        }

    def validate(self) -> list[str]:
        """Validate configuration and return list of warnings.

        Returns:
            List of warning messages (non-fatal issues).
        """
        warnings = []
        mel, diffusion, network, train = (
            self.mel,
            self.diffusion,
            self.network,
            self.train,
        )

        if not mel.hop <= mel.win <= mel.n_fft:
            raise ConfigurationError(
                f"Mel geometry requires hop <= win <= n_fft, got "
                f"hop={mel.hop}, win={mel.win}, n_fft={mel.n_fft}"
            )
        if mel.filterbank not in ("slaney", "htk"):
            raise ConfigurationError(f"Unknown filterbank '{mel.filterbank}'")
        if diffusion.timesteps < 1:
            raise ConfigurationError(
                f"timesteps must be >= 1, got {diffusion.timesteps}"
            )
        if not 1 <= train.t_prime <= diffusion.timesteps:
            raise ConfigurationError(
                f"t_prime must lie in 1..{diffusion.timesteps}, got {train.t_prime}"
            )
        if train.mode not in TRAINING_MODES:
            raise ConfigurationError(
                f"mode must be one of {TRAINING_MODES}, got '{train.mode}'"
            )
        if network.discriminator_domain not in DISCRIMINATOR_DOMAINS:
            raise ConfigurationError(
                f"discriminator_domain must be one of {DISCRIMINATOR_DOMAINS}"
            )
        if network.denoiser_layers < 2 + 2 * network.downsample_stages:
            raise ConfigurationError(
                "denoiser_layers must cover input, output and every "
                "downsampling/upsampling layer"
            )
        if train.batch_size < 1 or train.segment_frames < 1:
            raise ConfigurationError("batch_size and segment_frames must be >= 1")

        if train.t_prime < 0.5 * diffusion.timesteps:
            warnings.append(
                f"t_prime={train.t_prime} is far below timesteps="
                f"{diffusion.timesteps}; the one-step student sees little noise."
            )
        if train.segment_frames % (2**network.downsample_stages):
            warnings.append(
                "segment_frames is not a multiple of the U-Net stride; "
                "training crops will be reflect-padded."
            )

        return warnings


# Default shared config instance
def get_config(
    root_path: Path | None = None, config_path: Path | None = None
) -> OneStepVCConfig:
    return OneStepVCConfig(root_path=root_path, config_path=config_path)
