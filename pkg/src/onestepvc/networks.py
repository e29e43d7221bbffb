"""Denoiser U-Net, content encoders and speaker embedders.

All tensors follow the mel layout ``[batch, n_mels, frames]``. Content
embeddings are frame-major ``[batch, frames, content_dim]`` and speaker
embeddings are ``[batch, speaker_dim]`` with unit L2 norm.
"""

import logging
import math
from collections.abc import Iterator
from contextlib import contextmanager

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .config import NetworkConfig
from .exceptions import ShapeError

logger = logging.getLogger(__name__)


@contextmanager
def frozen(module: nn.Module) -> Iterator[nn.Module]:
    """Temporarily disable gradients for every parameter of ``module``.

    Gradients still flow through the module to its inputs.
    """
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sinusoidal embedding of 1-based diffusion steps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.float64, device=t.device)
        / max(half - 1, 1)
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class GLUConv(nn.Module):
    """Weight-normalized 1D convolution followed by a gated linear unit."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__()
        self.conv = weight_norm(
            nn.Conv1d(
                in_channels,
                2 * out_channels,
                kernel_size,
                padding=(kernel_size - 1) // 2,
            )
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.glu(self.conv(x), dim=1)


class ConditionedBlock(nn.Module):
    """GLU conv block with additive time embedding and speaker/content FiLM."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        time_dim: int,
        speaker_dim: int,
        content_dim: int,
    ):
        super().__init__()
        self.glu = GLUConv(in_channels, out_channels, kernel_size)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.speaker_film = nn.Linear(speaker_dim, 2 * out_channels)
        self.content_film = nn.Conv1d(content_dim, 2 * out_channels, 1)
        self.residual = in_channels == out_channels

    def forward(
        self,
        h: torch.Tensor,
        temb: torch.Tensor,
        s: torch.Tensor,
        p: torch.Tensor,
    ) -> torch.Tensor:
        out = self.glu(h) + self.time_proj(temb)[:, :, None]
        gamma_s, beta_s = self.speaker_film(s)[:, :, None].chunk(2, dim=1)
        p_local = F.adaptive_avg_pool1d(p, out.shape[-1])
        gamma_p, beta_p = self.content_film(p_local).chunk(2, dim=1)
        out = out * (1.0 + gamma_s + gamma_p) + beta_s + beta_p
        return out + h if self.residual else out


class Denoiser(nn.Module):
    """U-Net noise predictor shared by the teacher and the one-step student.

    ``denoiser_layers`` counts every convolutional layer: the input layer,
    ``downsample_stages`` strided layers, the middle blocks, the same number of
    upsampling layers and the output projection.
    """

    def __init__(self, n_mels: int, config: NetworkConfig):
        super().__init__()
        self.n_mels = n_mels
        self.config = config
        self.stages = config.downsample_stages
        hidden = config.hidden_channels
        middle = config.denoiser_layers - 2 - 2 * self.stages
        if middle < 0:
            raise ShapeError(
                f"{config.denoiser_layers} layers cannot hold "
                f"{self.stages} down/up stages"
            )

        def block(in_ch: int) -> ConditionedBlock:
            return ConditionedBlock(
                in_ch,
                hidden,
                config.kernel_size,
                config.time_embedding_dim,
                config.speaker_dim,
                config.content_dim,
            )

        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embedding_dim, config.time_embedding_dim),
            nn.SiLU(),
            nn.Linear(config.time_embedding_dim, config.time_embedding_dim),
        )
        self.input_block = block(n_mels)
        self.down_blocks = nn.ModuleList(block(hidden) for _ in range(self.stages))
        self.mid_blocks = nn.ModuleList(block(hidden) for _ in range(middle))
        self.up_blocks = nn.ModuleList(block(hidden) for _ in range(self.stages))
        self.output_conv = weight_norm(
            nn.Conv1d(
                hidden,
                n_mels,
                config.kernel_size,
                padding=(config.kernel_size - 1) // 2,
            )
        )

    @property
    def stride(self) -> int:
        return 2**self.stages

    def _check_inputs(self, x_t, s, p) -> None:
        if x_t.dim() != 3 or x_t.shape[1] != self.n_mels:
            raise ShapeError(
                f"Expected mel batch [B, {self.n_mels}, frames], "
                f"got {tuple(x_t.shape)}"
            )
        if x_t.shape[-1] == 0:
            raise ShapeError("Denoiser input has no frames")
        if s.shape != (x_t.shape[0], self.config.speaker_dim):
            raise ShapeError(
                f"Speaker embedding must be [{x_t.shape[0]}, "
                f"{self.config.speaker_dim}], got {tuple(s.shape)}"
            )
        expected = (x_t.shape[0], x_t.shape[-1], self.config.content_dim)
        if tuple(p.shape) != expected:
            raise ShapeError(
                f"Content embedding must be {list(expected)}, got {tuple(p.shape)}"
            )

    def forward(
        self,
        x_t: torch.Tensor,
        t: int | torch.Tensor,
        s: torch.Tensor,
        p: torch.Tensor,
    ) -> torch.Tensor:
        """Predict the noise in ``x_t`` at 1-based step ``t``."""
        self._check_inputs(x_t, s, p)
        frames = x_t.shape[-1]
        if not isinstance(t, torch.Tensor) or t.dim() == 0:
            t = torch.full((x_t.shape[0],), int(t), device=x_t.device)
        temb = sinusoidal_embedding(t, self.config.time_embedding_dim).to(x_t.dtype)
        temb = self.time_mlp(temb)

        pad = (-frames) % self.stride
        p = p.transpose(1, 2)
        if pad:
            mode = "reflect" if pad < frames else "replicate"
            x_t = F.pad(x_t, (0, pad), mode=mode)
            p = F.pad(p, (0, pad), mode=mode)

        h = self.input_block(x_t, temb, s, p)
        skips = []
        for block in self.down_blocks:
            skips.append(h)
            h = block(F.avg_pool1d(h, 2), temb, s, p)
        for block in self.mid_blocks:
            h = block(h, temb, s, p)
        for block in self.up_blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest") + skips.pop()
            h = block(h, temb, s, p)
        return self.output_conv(h)[..., :frames]


class _ConvEncoder(nn.Module):
    """Stack of GLU conv layers with instance normalization and a 1x1 head."""

    def __init__(
        self,
        n_mels: int,
        layers: int,
        hidden: int,
        out_dim: int,
        kernel_size: int,
    ):
        super().__init__()
        if layers < 1:
            raise ShapeError("Encoders need at least one layer")
        self.n_mels = n_mels
        self.layers = nn.ModuleList(
            GLUConv(n_mels if i == 0 else hidden, hidden, kernel_size)
            for i in range(layers)
        )
        self.norm = nn.InstanceNorm1d(hidden)
        self.head = weight_norm(nn.Conv1d(hidden, out_dim, 1))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Encode mels [B, n_mels, frames] to content [B, frames, out_dim]."""
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[1] != self.n_mels:
            raise ShapeError(
                f"Expected mel batch [B, {self.n_mels}, frames], got {tuple(x.shape)}"
            )
        if x.shape[-1] == 0:
            raise ShapeError("Cannot encode an empty mel")
        h = self.normalize(x)
        for layer in self.layers:
            h = self.norm(layer(h))
        return self.head(h).transpose(1, 2)


class ContentEncoder(_ConvEncoder):
    """Trainable lightweight content encoder of the one-step converter.

    The utterance-level mean is removed first, so a constant offset applied to
    every log-mel bin leaves the output unchanged.
    """

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return x - x.mean(dim=(1, 2), keepdim=True)


class TeacherContentEncoder(_ConvEncoder):
    """Frozen content encoder of the teacher, pretrained as an autoencoder bottleneck.

    Per-bin time statistics are removed at the input, which strips static
    speaker coloration from the mel before encoding.
    """

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return x - x.mean(dim=-1, keepdim=True)


def content_encoder_parameter_count(
    n_mels: int, layers: int, hidden: int, out_dim: int, kernel_size: int
) -> int:
    """Closed-form parameter count of a content encoder.

    Each weight-normalized conv holds the direction tensor, one gain per output
    channel and one bias per output channel.
    """
    total = 0
    for i in range(layers):
        in_ch = n_mels if i == 0 else hidden
        total += 2 * hidden * in_ch * kernel_size + 2 * hidden + 2 * hidden
    total += out_dim * hidden + out_dim + out_dim
    return total


class ContentDecoder(nn.Module):
    """Speaker-conditioned decoder used only to pretrain the teacher encoder."""

    def __init__(self, n_mels: int, config: NetworkConfig, layers: int = 3):
        super().__init__()
        hidden = config.teacher_content_hidden
        self.input = GLUConv(config.content_dim, hidden, config.kernel_size)
        self.blocks = nn.ModuleList(
            GLUConv(hidden, hidden, config.kernel_size) for _ in range(layers)
        )
        self.films = nn.ModuleList(
            nn.Linear(config.speaker_dim, 2 * hidden) for _ in range(layers)
        )
        self.output = nn.Conv1d(hidden, n_mels, 1)

    def forward(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        h = self.input(p.transpose(1, 2))
        for block, film in zip(self.blocks, self.films):
            gamma, beta = film(s)[:, :, None].chunk(2, dim=1)
            h = h + block(h) * (1.0 + gamma) + beta
        return self.output(h)


class ContentAutoencoder(nn.Module):
    def __init__(self, encoder: TeacherContentEncoder, decoder: ContentDecoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x), s)


def build_denoiser(n_mels: int, config: NetworkConfig) -> Denoiser:
    return Denoiser(n_mels, config)


def build_content_encoder(
    n_mels: int, config: NetworkConfig, layers: int | None = None
) -> ContentEncoder:
    return ContentEncoder(
        n_mels,
        layers or config.content_layers,
        config.content_hidden,
        config.content_dim,
        config.kernel_size,
    )


def build_teacher_content_encoder(
    n_mels: int, config: NetworkConfig
) -> TeacherContentEncoder:
    return TeacherContentEncoder(
        n_mels,
        config.teacher_content_layers,
        config.teacher_content_hidden,
        config.content_dim,
        config.kernel_size,
    )


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class EnvelopeSpeakerEmbedder(nn.Module):
    """Deterministic embedder of the static spectral envelope of an utterance.

    The time-averaged log-mel is centered across bins and projected by a fixed
    seeded random matrix. Synthetic speakers register the embedding of their
    envelope, so the registry and mel-derived embeddings share one space.
    """

    def __init__(self, n_mels: int, dim: int, seed: int = 0):
        super().__init__()
        self.n_mels = n_mels
        self.dim = dim
        generator = torch.Generator().manual_seed(seed)
        projection = torch.randn(dim, n_mels, generator=generator, dtype=torch.float64)
        self.register_buffer("projection", projection / math.sqrt(n_mels))
        self.registry: dict[int, torch.Tensor] = {}

    def embed_envelope(self, envelope: torch.Tensor) -> torch.Tensor:
        """Embed static envelopes [B, n_mels] (or a single [n_mels])."""
        envelope = envelope.to(torch.float64)
        centered = envelope - envelope.mean(dim=-1, keepdim=True)
        return _unit(centered @ self.projection.T)

    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        if mel.dim() != 3 or mel.shape[1] != self.n_mels:
            raise ShapeError(
                f"Expected mel batch [B, {self.n_mels}, frames], got {tuple(mel.shape)}"
            )
        if mel.shape[-1] == 0:
            raise ShapeError("Cannot embed an empty utterance")
        return self.embed_envelope(mel.mean(dim=-1)).to(mel.dtype)

    def register(self, speaker_id: int, envelope: torch.Tensor) -> torch.Tensor:
        vector = self.embed_envelope(envelope)
        self.registry[int(speaker_id)] = vector
        return vector

    def lookup(self, speaker_id: int) -> torch.Tensor:
        try:
            return self.registry[int(speaker_id)]
        except KeyError as e:
            raise KeyError(f"Speaker {speaker_id} is not registered") from e


class ConvSpeakerEmbedder(nn.Module):
    """Mean-pooled convolutional speaker embedder for real audio."""

    def __init__(self, n_mels: int, dim: int, hidden: int = 128, layers: int = 3):
        super().__init__()
        self.n_mels = n_mels
        self.dim = dim
        self.hidden = hidden
        self.layers = nn.ModuleList(
            GLUConv(n_mels if i == 0 else hidden, hidden, 5) for i in range(layers)
        )
        self.proj = nn.Linear(hidden, dim)

    def geometry(self) -> dict[str, int]:
        return {
            "n_mels": self.n_mels,
            "dim": self.dim,
            "hidden": self.hidden,
            "layers": len(self.layers),
        }

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = mel
        for layer in self.layers:
            h = layer(h)
        return _unit(self.proj(h.mean(dim=-1)))

    @torch.no_grad()
    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        if mel.shape[-1] == 0:
            raise ShapeError("Cannot embed an empty utterance")
        was_training = self.training
        self.eval()
        try:
            return self(mel)
        finally:
            self.train(was_training)


def embed_speaker(
    utterance: torch.Tensor | int,
    embedder: EnvelopeSpeakerEmbedder | ConvSpeakerEmbedder,
) -> torch.Tensor:
    """Embed a mel utterance, or look up a registered synthetic speaker id."""
    if isinstance(utterance, int):
        if not isinstance(embedder, EnvelopeSpeakerEmbedder):
            raise TypeError("Speaker id lookup needs a registry-backed embedder")
        return embedder.lookup(utterance)
    return embedder.embed(utterance).squeeze(0)
