"""One-step voice conversion and the real-time-factor benchmark.

Conversion diffuses the source mel to the trained level t', encodes the clean
source with the content encoder and takes a single reverse step of the student
denoiser conditioned on the target speaker.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import StudentModel, load_checkpoint
from .diffusion import NoiseSchedule, forward_diffuse, reverse_step
from .exceptions import BenchmarkError, ConditioningError, ConfigurationError, GeometryError
from .interfaces import SpeakerEmbedderProtocol
from .networks import EnvelopeSpeakerEmbedder, count_parameters

logger = logging.getLogger(__name__)


def one_step_convert(
    x0: torch.Tensor,
    s: torch.Tensor,
    noise: torch.Tensor,
    denoiser: nn.Module,
    content_encoder: nn.Module,
    schedule: NoiseSchedule,
    t_prime: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Exactly one content-encoder and one denoiser evaluation.

    Returns:
        The converted mel and the content embedding of ``x0``.
    """
    p = content_encoder(x0)
    diffused = forward_diffuse(x0, t_prime, noise, schedule)
    eps = denoiser(diffused.x_t, t_prime, s, p)
    return reverse_step(diffused.x_t, t_prime, eps, schedule), p


@dataclass
class ConversionRequest:
    """Source log-mel plus the target speaker.

    ``target`` is a registered speaker id, an embedding vector [d], or a
    reference log-mel [n_mels, frames] embedded with the converter's embedder.
    """

    source: torch.Tensor
    target: torch.Tensor | int
    t_prime: int | None = None
    seed: int | None = None


class VoiceConverter:
    """Frozen one-step converter around a student checkpoint.

    Reference utterances are embedded with ``embedder``, by default the
    embedder the speaker table was built with: the trained convolutional
    embedder stored in the checkpoint, otherwise the envelope embedder.
    """

    def __init__(
        self,
        model: StudentModel,
        device: str | torch.device = "cpu",
        embedder: SpeakerEmbedderProtocol | None = None,
    ):
        self.model = model
        self.device = torch.device(device)
        if embedder is None:
            embedder = model.speaker_embedder
        if embedder is None:
            embedder = EnvelopeSpeakerEmbedder(
                model.mel_config.n_mels, model.network_config.speaker_dim
            )
        self.embedder = embedder
        for module in (model.denoiser, model.content_encoder):
            module.to(self.device).eval().requires_grad_(False)

    @classmethod
    def from_checkpoint(
        cls,
        path: Path,
        device: str | torch.device = "cpu",
        embedder: SpeakerEmbedderProtocol | None = None,
    ) -> "VoiceConverter":
        return cls(StudentModel.from_checkpoint(load_checkpoint(path)), device, embedder)

    @property
    def hop(self) -> int:
        return self.model.mel_config.hop

    @property
    def sample_rate(self) -> int:
        return self.model.mel_config.sample_rate

    def parameter_counts(self) -> dict[str, int]:
        return {
            "denoiser": count_parameters(self.model.denoiser),
            "content_encoder": count_parameters(self.model.content_encoder),
        }

    def _check_source(self, mel: torch.Tensor) -> torch.Tensor:
        n_mels = self.model.mel_config.n_mels
        batch = mel.unsqueeze(0) if mel.dim() == 2 else mel
        if batch.dim() != 3 or batch.shape[1] != n_mels:
            raise GeometryError(
                f"Checkpoint expects {n_mels} mel bins, got source of shape "
                f"{tuple(mel.shape)}"
            )
        if batch.shape[-1] == 0:
            raise GeometryError("Source mel has no frames")
        return batch

    def target_embedding(self, target: torch.Tensor | int) -> torch.Tensor:
        """Resolve the target speaker to an embedding vector [speaker_dim]."""
        dim = self.model.network_config.speaker_dim
        if isinstance(target, int):
            if target not in self.model.speaker_table:
                raise ConditioningError(f"Speaker {target} is not in the checkpoint")
            return self.model.speaker_table[target].to(torch.float32)
        if target.dim() == 1:
            if target.shape[0] != dim:
                raise GeometryError(f"Speaker embedding must have {dim} values")
            return target.to(torch.float32)
        return self.embedder.embed(target).reshape(-1).to(torch.float32)

    def prepare(self, request: ConversionRequest):
        """Move everything outside the timed region onto the device.

        Returns normalized source, speaker batch and the noise for t'.
        """
        if request.t_prime is not None and request.t_prime != self.model.t_prime:
            raise ConfigurationError(
                f"Checkpoint was trained at t'={self.model.t_prime}, "
                f"request asks for {request.t_prime}"
            )
        x = self._check_source(request.source).to(torch.float32)
        if self.model.normalizer is not None:
            x = self.model.normalizer.normalize(x)
        s = self.target_embedding(request.target)
        s = s.unsqueeze(0).expand(x.shape[0], -1)
        generator = torch.Generator()
        if request.seed is not None:
            generator.manual_seed(request.seed)
        else:
            generator.seed()
        noise = torch.randn(x.shape, generator=generator)
        return x.to(self.device), s.to(self.device), noise.to(self.device)

    @torch.no_grad()
    def convert(self, request: ConversionRequest) -> torch.Tensor:
        """Convert one request; the output has the shape of the source."""
        x, s, noise = self.prepare(request)
        model = self.model
        out, _ = one_step_convert(
            x,
            s,
            noise,
            model.denoiser,
            model.content_encoder,
            model.schedule,
            model.t_prime,
        )
        if model.normalizer is not None:
            out = model.normalizer.denormalize(out)
        out = out.cpu()
        if not torch.isfinite(out).all():
            raise GeometryError("Conversion produced non-finite values")
        return out.reshape(request.source.shape)


def convert_one_step(request: ConversionRequest, converter: VoiceConverter) -> torch.Tensor:
    return converter.convert(request)


# ---------------------------------------------------------------------------
# Real-time factor
# ---------------------------------------------------------------------------


@dataclass
class RtfReport:
    """Median timings of the content encoder and denoiser over repetitions."""

    model: str
    device: str
    frames: int
    playback_seconds: float
    content_seconds: float
    denoiser_seconds: float
    processing_seconds: float
    rtf: float
    repetitions: int
    warmup: int
    params: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_device(name: str) -> torch.device:
    """Map ``cpu``/``accelerator`` (or an explicit torch device) to a device."""
    if name == "accelerator":
        if torch.cuda.is_available():
            return torch.device("cuda")
        if torch.backends.mps.is_available():
            return torch.device("mps")
        raise BenchmarkError("No accelerator is available on this machine")
    return torch.device(name)


def _synchronize(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)
    elif device.type == "mps":
        torch.mps.synchronize()


@torch.no_grad()
def measure_rtf(
    converter: VoiceConverter,
    request: ConversionRequest,
    repetitions: int = 30,
    warmup: int = 5,
    name: str = "",
) -> RtfReport:
    """Time the content encoder and denoiser calls of one conversion.

    Speaker embedding, normalization, noise sampling and vocoding happen
    outside the timed region. Playback time is ``frames * hop / sample_rate``.
    """
    if repetitions < 1:
        raise BenchmarkError(f"repetitions must be >= 1, got {repetitions}")
    if warmup < 0:
        raise BenchmarkError(f"warmup must be >= 0, got {warmup}")
    frames = request.source.shape[-1]
    if frames == 0 or request.source.numel() == 0:
        raise BenchmarkError("Cannot benchmark a zero-length input")

    model, device = converter.model, converter.device
    x, s, noise = converter.prepare(request)
    diffused = forward_diffuse(x, model.t_prime, noise, model.schedule)
    content_times, denoiser_times, totals = [], [], []
    for i in range(warmup + repetitions):
        _synchronize(device)
        start = time.perf_counter()
        p = model.content_encoder(x)
        _synchronize(device)
        middle = time.perf_counter()
        model.denoiser(diffused.x_t, model.t_prime, s, p)
        _synchronize(device)
        end = time.perf_counter()
        if i >= warmup:
            content_times.append(middle - start)
            denoiser_times.append(end - middle)
            totals.append(end - start)

    playback = frames * model.mel_config.hop / model.mel_config.sample_rate
    processing = float(np.median(totals))
    report = RtfReport(
        model=name,
        device=str(device),
        frames=frames,
        playback_seconds=playback,
        content_seconds=float(np.median(content_times)),
        denoiser_seconds=float(np.median(denoiser_times)),
        processing_seconds=processing,
        rtf=processing / playback,
        repetitions=repetitions,
        warmup=warmup,
        params=converter.parameter_counts(),
    )
    logger.info(f"RTF {name or 'model'} on {device}: {report.rtf:.5f}")
    return report


@dataclass
class RtfComparison:
    first: RtfReport
    second: RtfReport

    @property
    def ratio(self) -> float:
        """Speedup of the second model over the first (ratio of median RTFs)."""
        return self.first.rtf / self.second.rtf

    @property
    def content_ratio(self) -> float:
        return self.first.content_seconds / self.second.content_seconds

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "content_ratio": self.content_ratio,
            "models": [self.first.to_dict(), self.second.to_dict()],
        }


def compare_models_rtf(
    first: VoiceConverter,
    second: VoiceConverter,
    request: ConversionRequest,
    repetitions: int = 30,
    warmup: int = 5,
    names: tuple[str, str] = ("A", "B"),
) -> RtfComparison:
    """Benchmark two converters on the same input and device."""
    if first.device != second.device:
        raise BenchmarkError(
            f"Models live on different devices ({first.device} vs {second.device})"
        )
    return RtfComparison(
        first=measure_rtf(first, request, repetitions, warmup, names[0]),
        second=measure_rtf(second, request, repetitions, warmup, names[1]),
    )


def format_rtf_table(reports: list[RtfReport]) -> str:
    """Aligned plain-text table with columns model, device, rtf, params."""
    rows = [("model", "device", "rtf", "params")]
    for r in reports:
        rows.append((r.model, r.device, f"{r.rtf:.6f}", str(sum(r.params.values()))))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in rows
    ) + "\n"
