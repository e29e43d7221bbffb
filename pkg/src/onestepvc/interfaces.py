"""Interfaces and Protocols for the pluggable pipeline components."""

from pathlib import Path
from typing import Protocol, runtime_checkable

import torch


@runtime_checkable
class VocoderProtocol(Protocol):
    """Maps a batch of mels [B, n_mels, frames] to waveforms [B, frames * hop]."""

    hop: int
    differentiable: bool

    def __call__(self, mel: torch.Tensor) -> torch.Tensor:
        """Synthesize waveforms from mels."""
        ...


@runtime_checkable
class SpeakerEmbedderProtocol(Protocol):
    """Produces unit-norm speaker embeddings from mels [B, n_mels, frames]."""

    dim: int

    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        """Return embeddings of shape [B, dim] with unit L2 norm."""
        ...


@runtime_checkable
class JudgeProtocol(Protocol):
    """External quality judge (e.g. a MOS predictor or an ASR-based CER)."""

    name: str

    def score(self, wav_path: Path) -> float:
        """Return a scalar score for one WAV file."""
        ...
