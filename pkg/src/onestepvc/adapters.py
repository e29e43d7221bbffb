"""Adapters for onestepvc.

This module provides concrete vocoders behind ``VocoderProtocol`` and the WAV
I/O helpers. Optional dependencies (soundfile) are lazily imported so that the
core package trains and converts mels without them.
"""

from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING

import librosa
import numpy as np
import torch
import torch.nn.functional as F

from .config import MelConfig
from .exceptions import ConfigurationError, GeometryError
from .interfaces import VocoderProtocol

# Type hints only - no runtime import
if TYPE_CHECKING:
    import soundfile  # noqa: F401

logger = getLogger(__name__)

VOCODER_KINDS = ("bypass", "griffinlim")


def _import_soundfile():
    """Lazily import soundfile with helpful error message."""
    try:
        import soundfile

        return soundfile
    except ImportError as e:
        raise ConfigurationError(
            "soundfile is required for WAV input/output. "
            "Install it with: uv add soundfile"
        ) from e


def read_wav(path: Path) -> tuple[np.ndarray, int]:
    """Read a WAV file as a mono float32 array and its sample rate."""
    sf = _import_soundfile()
    audio, sr = sf.read(str(path), dtype="float32", always_2d=True)
    return audio.mean(axis=1), int(sr)


def write_wav(path: Path, audio: np.ndarray, sample_rate: int) -> None:
    """Write a mono waveform as 16-bit PCM."""
    sf = _import_soundfile()
    peak = float(np.max(np.abs(audio))) if audio.size else 0.0
    if peak > 1.0:
        audio = audio / peak
    sf.write(str(path), audio, sample_rate, subtype="PCM_16")


class BypassVocoder(VocoderProtocol):
    """Differentiable stand-in vocoder.

    Flattens the mel frame by frame and linearly resamples the sequence to
    ``frames * hop`` samples. When ``n_mels == hop`` the output is exactly the
    flattened mel.
    """

    differentiable = True

    def __init__(self, n_mels: int, hop: int):
        self.n_mels = n_mels
        self.hop = hop

    def __call__(self, mel: torch.Tensor) -> torch.Tensor:
        _check_mel(mel, self.n_mels)
        b, _, frames = mel.shape
        flat = mel.transpose(1, 2).reshape(b, 1, frames * self.n_mels)
        if self.n_mels == self.hop:
            return flat.squeeze(1)
        wave = F.interpolate(
            flat, size=frames * self.hop, mode="linear", align_corners=False
        )
        return wave.squeeze(1)


class GriffinLimVocoder(VocoderProtocol):
    """Phase reconstruction from log-mels with librosa, for writing WAV files.

    Not differentiable; used only at conversion time.
    """

    differentiable = False

    def __init__(self, mel_config: MelConfig, n_iter: int = 32):
        self.mel_config = mel_config
        self.hop = mel_config.hop
        self.n_iter = n_iter

    def __call__(self, mel: torch.Tensor) -> torch.Tensor:
        cfg = self.mel_config
        _check_mel(mel, cfg.n_mels)
        waves = []
        for m in mel.detach().cpu().double().numpy():
            magnitude = librosa.feature.inverse.mel_to_stft(
                np.exp(m),
                sr=cfg.sample_rate,
                n_fft=cfg.n_fft,
                power=1.0,
                fmin=cfg.fmin,
                fmax=cfg.f_max,
                htk=cfg.filterbank == "htk",
                norm="slaney" if cfg.filterbank == "slaney" else None,
            )
            waves.append(
                librosa.griffinlim(
                    magnitude,
                    n_iter=self.n_iter,
                    hop_length=cfg.hop,
                    win_length=cfg.win,
                    n_fft=cfg.n_fft,
                    random_state=0,
                    length=m.shape[-1] * cfg.hop,
                )
            )
        return torch.from_numpy(np.stack(waves)).to(mel.dtype)


def _check_mel(mel: torch.Tensor, n_mels: int) -> None:
    if mel.dim() != 3 or mel.shape[1] != n_mels or mel.shape[-1] == 0:
        raise GeometryError(
            f"Vocoder expects mels [B, {n_mels}, frames > 0], got {tuple(mel.shape)}"
        )


def get_vocoder(kind: str, mel_config: MelConfig) -> VocoderProtocol:
    """Build a vocoder by name."""
    if kind == "bypass":
        return BypassVocoder(mel_config.n_mels, mel_config.hop)
    if kind == "griffinlim":
        return GriffinLimVocoder(mel_config)
    raise ConfigurationError(f"Unknown vocoder '{kind}', expected one of {VOCODER_KINDS}")


def get_default_vocoder(mel_config: MelConfig) -> VocoderProtocol:
    """Get the vocoder used inside waveform-domain adversarial losses.

    No pretrained neural vocoder ships with the package, so this falls back to
    the differentiable bypass vocoder (graceful degradation).
    """
    logger.warning(
        "No neural vocoder configured - waveform-domain discriminators "
        "run on the bypass vocoder."
    )
    return BypassVocoder(mel_config.n_mels, mel_config.hop)


def vocode(mel: torch.Tensor, vocoder: VocoderProtocol) -> torch.Tensor:
    """Synthesize waveforms of length ``frames * hop`` from mels."""
    wave = vocoder(mel)
    expected = mel.shape[-1] * vocoder.hop
    if wave.shape[-1] != expected:
        raise GeometryError(
            f"Vocoder produced {wave.shape[-1]} samples, expected {expected}"
        )
    return wave
