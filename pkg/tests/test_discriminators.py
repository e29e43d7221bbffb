import dataclasses

import pytest
import torch

from onestepvc.discriminators import (
    MelPatchDiscriminator,
    PeriodDiscriminator,
    ResolutionDiscriminator,
    build_discriminator,
    discriminate,
)
from onestepvc.exceptions import DomainError


def test_mel_domain_taps(network_config):
    disc = build_discriminator(16, network_config)
    scores, features = discriminate(torch.randn(2, 16, 16), disc)
    assert len(scores) == len(network_config.mel_scales)
    assert len(features) == disc.tap_count == 3 * len(network_config.mel_scales)
    assert all(score.shape[0] == 2 for score in scores)


def test_mel_domain_rejects_waveforms(network_config):
    disc = build_discriminator(16, network_config)
    with pytest.raises(DomainError):
        disc(torch.randn(2, 256))


def test_waveform_domain(network_config):
    config = dataclasses.replace(
        network_config,
        discriminator_domain="waveform",
        periods=(2, 3),
        resolutions=((64, 16, 64),),
    )
    disc = build_discriminator(16, config)
    scores, features = disc(torch.randn(2, 257))
    assert len(scores) == 3
    assert len(features) == disc.tap_count == 2 * 4 + 4
    with pytest.raises(DomainError):
        disc(torch.randn(2, 16, 16))


def test_unknown_domain(network_config):
    with pytest.raises(DomainError):
        build_discriminator(16, dataclasses.replace(network_config, discriminator_domain="x"))


def test_sub_discriminators_are_deterministic():
    x = torch.randn(1, 1, 300)
    for disc in (PeriodDiscriminator(3, 4), ResolutionDiscriminator(64, 16, 64, 4)):
        a, fa = disc(x)
        b, fb = disc(x)
        assert torch.equal(a, b)
        assert len(fa) == disc.tap_count
    patch = MelPatchDiscriminator(scale=2, channels=4)
    score, feats = patch(torch.randn(1, 16, 9))
    assert len(feats) == 3 and score.dim() == 2
