import pytest
import torch

from onestepvc.exceptions import ShapeError
from onestepvc.networks import (
    ConvSpeakerEmbedder,
    EnvelopeSpeakerEmbedder,
    build_content_encoder,
    build_denoiser,
    build_teacher_content_encoder,
    content_encoder_parameter_count,
    count_parameters,
    embed_speaker,
    frozen,
)


@pytest.mark.parametrize("frames", [1, 13, 16, 32, 33, 64])
def test_denoiser_preserves_shape(network_config, frames):
    denoiser = build_denoiser(16, network_config)
    x = torch.randn(2, 16, frames)
    s = torch.randn(2, 8)
    p = torch.randn(2, frames, 8)
    assert denoiser(x, 10, s, p).shape == x.shape
    assert denoiser(x, torch.tensor([1, 50]), s, p).shape == x.shape


def test_denoiser_is_deterministic_and_differentiable(network_config):
    torch.manual_seed(0)
    denoiser = build_denoiser(16, network_config).double().eval()
    x = torch.randn(1, 16, 4, dtype=torch.float64, requires_grad=True)
    s = torch.randn(1, 8, dtype=torch.float64)
    p = torch.randn(1, 4, 8, dtype=torch.float64)
    assert torch.equal(denoiser(x, 7, s, p), denoiser(x, 7, s, p))
    assert torch.autograd.gradcheck(lambda x_t: denoiser(x_t, 7, s, p), (x,))


def test_denoiser_output_depends_on_speaker(network_config):
    torch.manual_seed(0)
    denoiser = build_denoiser(16, network_config).eval()
    x, p = torch.randn(2, 16, 12), torch.randn(2, 12, 8)
    s = torch.randn(2, 8)
    with torch.no_grad():
        same = denoiser(x, 10, s, p)
        other = denoiser(x, 10, s.flip(0), p)
    assert not torch.allclose(same, other)


def test_denoiser_rejects_bad_inputs(network_config):
    denoiser = build_denoiser(16, network_config)
    s, p = torch.randn(1, 8), torch.randn(1, 8, 8)
    with pytest.raises(ShapeError):
        denoiser(torch.randn(1, 12, 8), 3, s, p)
    with pytest.raises(ShapeError):
        denoiser(torch.randn(1, 16, 8), 3, torch.randn(1, 5), p)
    with pytest.raises(ShapeError):
        denoiser(torch.randn(1, 16, 8), 3, s, torch.randn(1, 7, 8))


def test_content_encoder_shapes_and_offset_invariance(network_config):
    encoder = build_content_encoder(16, network_config).eval()
    x = torch.randn(3, 16, 10)
    p = encoder(x)
    assert p.shape == (3, 10, 8)
    assert torch.allclose(encoder(x + 2.5), p, atol=1e-5)
    assert encoder(x[0]).shape == (1, 10, 8)
    assert encoder(torch.cat([x, x], dim=-1)).shape == (3, 20, 8)


def test_teacher_encoder_ignores_static_envelope(network_config):
    encoder = build_teacher_content_encoder(16, network_config).eval()
    x = torch.randn(2, 16, 10)
    envelope = torch.linspace(-3, 3, 16)[None, :, None]
    assert torch.allclose(encoder(x + envelope), encoder(x), atol=1e-5)


def test_content_encoder_rejects_empty(network_config):
    encoder = build_content_encoder(16, network_config)
    with pytest.raises(ShapeError):
        encoder(torch.zeros(1, 16, 0))


@pytest.mark.parametrize("layers", [1, 3, 6])
def test_content_encoder_parameter_count_closed_form(network_config, layers):
    encoder = build_content_encoder(16, network_config, layers=layers)
    expected = content_encoder_parameter_count(16, layers, 16, 8, 3)
    assert count_parameters(encoder) == expected


def test_fewer_content_layers_means_fewer_parameters(network_config):
    one = count_parameters(build_content_encoder(16, network_config, layers=1))
    three = count_parameters(build_content_encoder(16, network_config, layers=3))
    assert one < three


def test_frozen_restores_flags(network_config):
    encoder = build_content_encoder(16, network_config)
    with frozen(encoder):
        assert not any(p.requires_grad for p in encoder.parameters())
    assert all(p.requires_grad for p in encoder.parameters())


def test_envelope_embedder_is_unit_and_registry_consistent():
    embedder = EnvelopeSpeakerEmbedder(16, 8)
    envelope = torch.linspace(-5, -1, 16, dtype=torch.float64)
    registered = embedder.register(3, envelope)
    assert float(registered.norm()) == pytest.approx(1.0)
    mel = envelope[:, None].repeat(1, 12).float()
    from_mel = embedder.embed(mel)[0].double()
    assert torch.allclose(from_mel, registered, atol=1e-5)
    assert torch.equal(embed_speaker(3, embedder), registered)


def test_envelope_embedder_is_seeded():
    a = EnvelopeSpeakerEmbedder(16, 8)
    b = EnvelopeSpeakerEmbedder(16, 8)
    assert torch.equal(a.projection, b.projection)


def test_envelope_embedder_unknown_speaker():
    with pytest.raises(KeyError):
        EnvelopeSpeakerEmbedder(16, 8).lookup(7)


def test_conv_embedder_outputs_unit_vectors():
    embedder = ConvSpeakerEmbedder(16, 8, hidden=16, layers=2)
    out = embedder.embed(torch.randn(3, 16, 10))
    assert out.shape == (3, 8)
    assert torch.allclose(out.norm(dim=-1), torch.ones(3), atol=1e-5)
    with pytest.raises(TypeError):
        embed_speaker(1, embedder)
    assert embedder.geometry() == {"n_mels": 16, "dim": 8, "hidden": 16, "layers": 2}
