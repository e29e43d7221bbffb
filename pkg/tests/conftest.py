"""Shared pytest fixtures for onestepvc tests."""

import os
from collections.abc import Generator
from pathlib import Path

import pytest
import torch
import yaml

from onestepvc.checkpoint import TeacherModel
from onestepvc.config import MelConfig, NetworkConfig, OneStepVCConfig
from onestepvc.data import MelNormalizer, generate_synthetic_corpus
from onestepvc.diffusion import make_schedule
from onestepvc.distillation import Distiller
from onestepvc.networks import build_denoiser, build_teacher_content_encoder

# Desk-scale geometry small enough for CPU unit tests.
TINY = {
    "sample_rate": 8000,
    "n_fft": 64,
    "win": 64,
    "hop": 16,
    "n_mels": 16,
    "timesteps": 50,
    "t_prime": 45,
    "denoiser_layers": 4,
    "hidden_channels": 16,
    "downsample_stages": 1,
    "kernel_size": 3,
    "time_embedding_dim": 16,
    "speaker_dim": 8,
    "content_dim": 8,
    "content_layers": 1,
    "content_hidden": 16,
    "teacher_content_layers": 1,
    "teacher_content_hidden": 16,
    "discriminator_channels": 8,
    "mel_scales": (1, 2),
    "batch_size": 4,
    "segment_frames": 16,
    "steps": 2,
    "content_pretrain_steps": 2,
    "speaker_embedder_steps": 2,
}


@pytest.fixture
def clean_env() -> Generator[None]:
    """Temporarily clear onestepvc-related environment variables."""
    saved = {k: os.environ.pop(k) for k in list(os.environ) if k.startswith("ONESTEPVC_")}
    yield
    for key in [k for k in os.environ if k.startswith("ONESTEPVC_")]:
        del os.environ[key]
    os.environ.update(saved)


@pytest.fixture
def tiny_config(tmp_path: Path, clean_env) -> OneStepVCConfig:
    return OneStepVCConfig(root_path=tmp_path, overrides=dict(TINY))


@pytest.fixture
def mel_config(tiny_config) -> MelConfig:
    return tiny_config.mel


@pytest.fixture
def network_config(tiny_config) -> NetworkConfig:
    return tiny_config.network


@pytest.fixture
def schedule():
    return make_schedule(50, 1e-4, 0.02)


@pytest.fixture
def corpus():
    """Four speakers x six contents, 16 mel bins, 24 frames."""
    return generate_synthetic_corpus(4, 6, 24, 0, n_mels=16, speaker_dim=8)


@pytest.fixture
def sample_yaml_config(tmp_path: Path) -> Path:
    """Create a sample onestepvc.yaml file."""
    config_path = tmp_path / "onestepvc.yaml"
    with open(config_path, "w") as f:
        yaml.dump({"batch_size": 8, "mode": "direct", "debug": True}, f)
    return config_path


@pytest.fixture
def teacher_model(tiny_config, corpus):
    torch.manual_seed(0)
    network, mel = tiny_config.network, tiny_config.mel
    return TeacherModel(
        denoiser=build_denoiser(mel.n_mels, network),
        content_encoder=build_teacher_content_encoder(mel.n_mels, network),
        schedule=make_schedule(50, 1e-4, 0.02),
        mel_config=mel,
        network_config=network,
        speaker_table=corpus.embedding_table(),
        normalizer=MelNormalizer.fit(r.mel for r in corpus.records),
    )


@pytest.fixture
def distiller(teacher_model, tiny_config):
    return Distiller(teacher_model, tiny_config.train, network=tiny_config.network)
