"""Multi-period, multi-resolution and mel-patch discriminators.

Every sub-discriminator returns ``(score, features)`` where ``score`` is a
flattened score map and ``features`` lists the intermediate activations used
by the feature matching loss.
"""

import logging

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .config import NetworkConfig
from .exceptions import DomainError

logger = logging.getLogger(__name__)

LRELU_SLOPE = 0.1


class PeriodDiscriminator(nn.Module):
    """Reshapes a waveform to [frames / period, period] and applies 2D convs."""

    def __init__(
        self,
        period: int,
        channels: int = 32,
        kernel_size: int = 5,
        downsample_scales: tuple[int, ...] = (3, 3, 3, 1),
        max_channels: int = 1024,
    ):
        super().__init__()
        self.period = period
        self.convs = nn.ModuleList()
        in_chs, out_chs = 1, channels
        for scale in downsample_scales:
            self.convs.append(
                weight_norm(
                    nn.Conv2d(
                        in_chs,
                        out_chs,
                        (kernel_size, 1),
                        (scale, 1),
                        padding=((kernel_size - 1) // 2, 0),
                    )
                )
            )
            in_chs = out_chs
            out_chs = min(out_chs * 4, max_channels)
        self.output_conv = weight_norm(nn.Conv2d(in_chs, 1, (3, 1), 1, padding=(1, 0)))

    @property
    def tap_count(self) -> int:
        return len(self.convs)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        # transform 1d to 2d -> (B, 1, T/P, P)
        b, c, t = x.shape
        if t % self.period != 0:
            n_pad = self.period - (t % self.period)
            mode = "reflect" if n_pad < t else "replicate"
            x = F.pad(x, (0, n_pad), mode)
            t += n_pad
        x = x.view(b, c, t // self.period, self.period)

        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            features.append(x)
        return torch.flatten(self.output_conv(x), 1, -1), features


class ResolutionDiscriminator(nn.Module):
    """2D conv discriminator over the STFT magnitude at one resolution."""

    def __init__(self, n_fft: int, hop: int, win: int, channels: int = 32):
        super().__init__()
        self.n_fft, self.hop, self.win = n_fft, hop, win
        self.register_buffer("window", torch.hann_window(win), persistent=False)
        self.convs = nn.ModuleList(
            [
                weight_norm(nn.Conv2d(1, channels, (3, 9), padding=(1, 4))),
                weight_norm(
                    nn.Conv2d(channels, channels, (3, 9), (1, 2), padding=(1, 4))
                ),
                weight_norm(
                    nn.Conv2d(channels, channels, (3, 9), (1, 2), padding=(1, 4))
                ),
                weight_norm(nn.Conv2d(channels, channels, (3, 3), padding=(1, 1))),
            ]
        )
        self.output_conv = weight_norm(nn.Conv2d(channels, 1, (3, 3), padding=(1, 1)))

    @property
    def tap_count(self) -> int:
        return len(self.convs)

    def spectrogram(self, x: torch.Tensor) -> torch.Tensor:
        spec = torch.stft(
            x.squeeze(1),
            n_fft=self.n_fft,
            hop_length=self.hop,
            win_length=self.win,
            window=self.window.to(x.dtype),
            center=True,
            return_complex=True,
        )
        return (spec.abs() + 1e-9).unsqueeze(1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        h = self.spectrogram(x).transpose(-1, -2)
        features = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LRELU_SLOPE)
            features.append(h)
        return torch.flatten(self.output_conv(h), 1, -1), features


class MelPatchDiscriminator(nn.Module):
    """2D conv discriminator over a mel treated as a [n_mels, frames] image.

    ``scale`` average-pools the time axis first, so a set of these covers
    several temporal resolutions.
    """

    def __init__(self, scale: int = 1, channels: int = 32, layers: int = 3):
        super().__init__()
        self.scale = scale
        self.convs = nn.ModuleList()
        in_chs = 1
        for i in range(layers):
            stride = (2, 1) if i else (1, 1)
            self.convs.append(
                weight_norm(nn.Conv2d(in_chs, channels, (3, 5), stride, padding=(1, 2)))
            )
            in_chs = channels
        self.output_conv = weight_norm(nn.Conv2d(channels, 1, (3, 3), padding=(1, 1)))

    @property
    def tap_count(self) -> int:
        return len(self.convs)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if self.scale > 1 and x.shape[-1] >= self.scale:
            x = F.avg_pool1d(x, self.scale, ceil_mode=True)
        h = x.unsqueeze(1)
        features = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LRELU_SLOPE)
            features.append(h)
        return torch.flatten(self.output_conv(h), 1, -1), features


class MultiDiscriminator(nn.Module):
    """Set of sub-discriminators sharing one input domain.

    The waveform domain combines period and resolution discriminators; the mel
    domain uses mel-patch discriminators at several time scales.
    """

    def __init__(self, n_mels: int, config: NetworkConfig):
        super().__init__()
        self.n_mels = n_mels
        self.domain = config.discriminator_domain
        channels = config.discriminator_channels
        if self.domain == "waveform":
            subs = [PeriodDiscriminator(p, channels) for p in config.periods]
            subs += [
                ResolutionDiscriminator(n_fft, hop, win, channels)
                for n_fft, hop, win in config.resolutions
            ]
        elif self.domain == "mel":
            subs = [MelPatchDiscriminator(s, channels) for s in config.mel_scales]
        else:
            raise DomainError(f"Unknown discriminator domain '{self.domain}'")
        self.discriminators = nn.ModuleList(subs)

    @property
    def tap_count(self) -> int:
        return sum(d.tap_count for d in self.discriminators)

    def check_domain(self, x: torch.Tensor) -> torch.Tensor:
        if self.domain == "mel":
            if x.dim() != 3 or x.shape[1] != self.n_mels:
                raise DomainError(
                    f"Mel-domain discriminator expects [B, {self.n_mels}, frames], "
                    f"got {tuple(x.shape)}"
                )
            return x
        if x.dim() == 2:
            return x.unsqueeze(1)
        if x.dim() != 3 or x.shape[1] != 1:
            raise DomainError(
                f"Waveform-domain discriminator expects [B, samples], "
                f"got {tuple(x.shape)}"
            )
        return x

    def forward(
        self, x: torch.Tensor
    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        x = self.check_domain(x)
        scores, features = [], []
        for d in self.discriminators:
            score, feats = d(x)
            scores.append(score)
            features.extend(feats)
        return scores, features


def build_discriminator(n_mels: int, config: NetworkConfig) -> MultiDiscriminator:
    return MultiDiscriminator(n_mels, config)


def discriminate(
    x: torch.Tensor, discriminator: MultiDiscriminator
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Score maps and ordered feature taps of every sub-discriminator."""
    return discriminator(x)
