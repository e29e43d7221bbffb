"""Single-file checkpoint container and the teacher/student model bundles.

A checkpoint is a ``torch.save`` archive of plain containers only (tensors,
numbers, strings, lists, dicts) so it loads with ``weights_only=True``.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from torch import nn

from .config import MelConfig, NetworkConfig
from .constants import CHECKPOINT_FORMAT_VERSION
from .data import MelNormalizer
from .diffusion import NoiseSchedule, make_schedule
from .exceptions import CheckpointError, GeometryError
from .networks import (
    ContentEncoder,
    ConvSpeakerEmbedder,
    Denoiser,
    TeacherContentEncoder,
    build_content_encoder,
    build_denoiser,
    build_teacher_content_encoder,
)

logger = logging.getLogger(__name__)

REQUIRED_KEYS = (
    "format_version",
    "kind",
    "params",
    "optimizers",
    "config",
    "schedule",
    "t_prime",
    "mel",
    "network",
    "rng",
    "step",
)


@dataclass
class Checkpoint:
    """Named parameter blocks, optimizer state, config echo and RNG state."""

    kind: str
    params: dict[str, dict[str, torch.Tensor]]
    config: dict[str, Any]
    schedule: dict[str, Any]
    t_prime: int | None
    mel: dict[str, Any]
    network: dict[str, Any]
    optimizers: dict[str, dict] = field(default_factory=dict)
    rng: dict[str, Any] = field(default_factory=dict)
    step: int = 0
    normalizer: dict[str, float] | None = None
    extras: dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def capture_rng_state() -> dict[str, Any]:
    return {"torch": torch.get_rng_state()}


def restore_rng_state(state: dict[str, Any]) -> None:
    if "torch" in state:
        torch.set_rng_state(state["torch"])


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """Write ``checkpoint`` atomically to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(checkpoint.to_dict(), tmp)
    os.replace(tmp, path)
    logger.debug(f"Saved {checkpoint.kind} checkpoint (step {checkpoint.step}) to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint, validating format version and required blocks."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        data = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e
    if not isinstance(data, dict):
        raise CheckpointError(f"Corrupt checkpoint {path}: not a mapping")
    missing = [k for k in REQUIRED_KEYS if k not in data]
    if missing:
        raise CheckpointError(f"Checkpoint {path} is missing blocks {missing}")
    if data["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {data['format_version']}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return Checkpoint(**data)


def load_params(module: nn.Module, checkpoint: Checkpoint, block: str) -> nn.Module:
    """Load a named parameter block, reporting geometry mismatches explicitly."""
    if block not in checkpoint.params:
        raise CheckpointError(f"Checkpoint has no parameter block '{block}'")
    try:
        module.load_state_dict(checkpoint.params[block])
    except RuntimeError as e:
        raise GeometryError(
            f"Parameter block '{block}' does not fit the configured geometry: {e}"
        ) from e
    return module


def _schedule_from(data: dict[str, Any]) -> NoiseSchedule:
    return make_schedule(data["T"], data["beta_start"], data["beta_end"], data["kind"])


def _network_from(data: dict[str, Any]) -> NetworkConfig:
    values = {
        k: tuple(tuple(x) if isinstance(x, list) else x for x in v)
        if isinstance(v, list)
        else v
        for k, v in data.items()
    }
    return NetworkConfig(**values)


def _config_dict(obj) -> dict[str, Any]:
    return {
        k: list(v) if isinstance(v, tuple) else v
        for k, v in dataclasses.asdict(obj).items()
    }


def _speaker_table_to_dict(table: dict[int, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {str(k): v.detach().cpu() for k, v in sorted(table.items())}


def _speaker_table_from_dict(data: dict[str, torch.Tensor]) -> dict[int, torch.Tensor]:
    return {int(k): v for k, v in data.items()}


def _embedder_blocks(
    embedder: ConvSpeakerEmbedder | None,
    params: dict[str, dict[str, torch.Tensor]],
    extras: dict[str, Any],
) -> None:
    if embedder is not None:
        params["speaker_embedder"] = embedder.state_dict()
        extras["speaker_embedder"] = embedder.geometry()


def _embedder_from(checkpoint: Checkpoint) -> ConvSpeakerEmbedder | None:
    geometry = checkpoint.extras.get("speaker_embedder")
    if geometry is None:
        return None
    embedder = load_params(ConvSpeakerEmbedder(**geometry), checkpoint, "speaker_embedder")
    return embedder.eval()


@dataclass
class TeacherModel:
    """Multi-step teacher: denoiser plus its frozen content encoder."""

    denoiser: Denoiser
    content_encoder: TeacherContentEncoder
    schedule: NoiseSchedule
    mel_config: MelConfig
    network_config: NetworkConfig
    speaker_table: dict[int, torch.Tensor]
    normalizer: MelNormalizer | None = None
    speaker_embedder: ConvSpeakerEmbedder | None = None

    def freeze(self) -> "TeacherModel":
        for module in (self.denoiser, self.content_encoder):
            module.eval()
            module.requires_grad_(False)
        return self

    def to_checkpoint(
        self,
        config: dict[str, Any],
        step: int = 0,
        optimizers: dict[str, dict] | None = None,
    ) -> Checkpoint:
        params = {
            "denoiser": self.denoiser.state_dict(),
            "content_encoder": self.content_encoder.state_dict(),
        }
        extras = {"speaker_table": _speaker_table_to_dict(self.speaker_table)}
        _embedder_blocks(self.speaker_embedder, params, extras)
        return Checkpoint(
            kind="teacher",
            params=params,
            config=config,
            schedule=self.schedule.to_dict(),
            t_prime=None,
            mel=_config_dict(self.mel_config),
            network=_config_dict(self.network_config),
            optimizers=optimizers or {},
            rng=capture_rng_state(),
            step=step,
            normalizer=self.normalizer.to_dict() if self.normalizer else None,
            extras=extras,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "TeacherModel":
        if checkpoint.kind != "teacher":
            raise CheckpointError(f"Expected a teacher checkpoint, got '{checkpoint.kind}'")
        mel = MelConfig(**checkpoint.mel)
        network = _network_from(checkpoint.network)
        denoiser = load_params(build_denoiser(mel.n_mels, network), checkpoint, "denoiser")
        content = load_params(
            build_teacher_content_encoder(mel.n_mels, network),
            checkpoint,
            "content_encoder",
        )
        return cls(
            denoiser=denoiser,
            content_encoder=content,
            schedule=_schedule_from(checkpoint.schedule),
            mel_config=mel,
            network_config=network,
            speaker_table=_speaker_table_from_dict(
                checkpoint.extras.get("speaker_table", {})
            ),
            normalizer=(
                MelNormalizer(**checkpoint.normalizer) if checkpoint.normalizer else None
            ),
            speaker_embedder=_embedder_from(checkpoint),
        )


@dataclass
class StudentModel:
    """One-step converter: student denoiser plus the content encoder it runs with.

    ``content_kind`` is ``trainable`` for the lightweight encoder and
    ``teacher`` when the frozen teacher encoder is reused.
    """

    denoiser: Denoiser
    content_encoder: ContentEncoder | TeacherContentEncoder
    schedule: NoiseSchedule
    t_prime: int
    mel_config: MelConfig
    network_config: NetworkConfig
    speaker_table: dict[int, torch.Tensor]
    normalizer: MelNormalizer | None = None
    speaker_embedder: ConvSpeakerEmbedder | None = None
    content_kind: str = "trainable"
    mode: str = "adcd"

    def to_checkpoint(
        self,
        config: dict[str, Any],
        step: int = 0,
        optimizers: dict[str, dict] | None = None,
        discriminator: nn.Module | None = None,
    ) -> Checkpoint:
        params = {
            "denoiser": self.denoiser.state_dict(),
            "content_encoder": self.content_encoder.state_dict(),
        }
        if discriminator is not None:
            params["discriminator"] = discriminator.state_dict()
        extras = {
            "speaker_table": _speaker_table_to_dict(self.speaker_table),
            "content_kind": self.content_kind,
            "content_layers": _content_layers(self.content_encoder),
            "mode": self.mode,
        }
        _embedder_blocks(self.speaker_embedder, params, extras)
        return Checkpoint(
            kind="student",
            params=params,
            config=config,
            schedule=self.schedule.to_dict(),
            t_prime=self.t_prime,
            mel=_config_dict(self.mel_config),
            network=_config_dict(self.network_config),
            optimizers=optimizers or {},
            rng=capture_rng_state(),
            step=step,
            normalizer=self.normalizer.to_dict() if self.normalizer else None,
            extras=extras,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "StudentModel":
        if checkpoint.kind != "student":
            raise CheckpointError(f"Expected a student checkpoint, got '{checkpoint.kind}'")
        mel = MelConfig(**checkpoint.mel)
        network = _network_from(checkpoint.network)
        kind = checkpoint.extras.get("content_kind", "trainable")
        if kind == "teacher":
            content = build_teacher_content_encoder(mel.n_mels, network)
        else:
            content = build_content_encoder(
                mel.n_mels, network, layers=checkpoint.extras.get("content_layers")
            )
        return cls(
            denoiser=load_params(
                build_denoiser(mel.n_mels, network), checkpoint, "denoiser"
            ),
            content_encoder=load_params(content, checkpoint, "content_encoder"),
            schedule=_schedule_from(checkpoint.schedule),
            t_prime=int(checkpoint.t_prime),
            mel_config=mel,
            network_config=network,
            speaker_table=_speaker_table_from_dict(
                checkpoint.extras.get("speaker_table", {})
            ),
            normalizer=(
                MelNormalizer(**checkpoint.normalizer) if checkpoint.normalizer else None
            ),
            speaker_embedder=_embedder_from(checkpoint),
            content_kind=kind,
            mode=checkpoint.extras.get("mode", "adcd"),
        )


def _content_layers(encoder: nn.Module) -> int:
    return len(encoder.layers)
