import dataclasses
import types

import pytest
import torch

from onestepvc.checkpoint import save_checkpoint
from onestepvc.exceptions import (
    BenchmarkError,
    ConditioningError,
    ConfigurationError,
    GeometryError,
)
from onestepvc.inference import (
    ConversionRequest,
    RtfComparison,
    VoiceConverter,
    compare_models_rtf,
    convert_one_step,
    format_rtf_table,
    measure_rtf,
    one_step_convert,
    resolve_device,
)
from onestepvc.networks import ConvSpeakerEmbedder, EnvelopeSpeakerEmbedder


@pytest.fixture
def converter(distiller):
    return VoiceConverter(distiller.model)


def test_convert_preserves_shape_and_is_seeded(converter, corpus):
    source = corpus.records[0].mel
    request = ConversionRequest(source, 2, seed=7)
    a = converter.convert(request)
    b = convert_one_step(request, converter)
    assert a.shape == source.shape
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


def test_convert_matches_single_kernel_call(converter, corpus):
    model = converter.model
    source = corpus.records[0].mel
    request = ConversionRequest(source, 1, seed=3)
    x, s, noise = converter.prepare(request)
    with torch.no_grad():
        out, _ = one_step_convert(
            x, s, noise, model.denoiser, model.content_encoder, model.schedule, model.t_prime
        )
    expected = model.normalizer.denormalize(out)[0]
    assert torch.allclose(converter.convert(request), expected, atol=1e-6)


def test_exactly_one_network_evaluation(converter, corpus):
    calls = {"denoiser": 0, "content": 0}
    converter.model.denoiser.register_forward_hook(
        lambda *_: calls.__setitem__("denoiser", calls["denoiser"] + 1)
    )
    converter.model.content_encoder.register_forward_hook(
        lambda *_: calls.__setitem__("content", calls["content"] + 1)
    )
    converter.convert(ConversionRequest(corpus.records[0].mel, 1, seed=0))
    assert calls == {"denoiser": 1, "content": 1}


def test_target_from_reference_mel(converter, corpus):
    reference = [r for r in corpus.records if r.speaker_id == 3][0].mel
    embedding = converter.target_embedding(reference)
    assert torch.allclose(embedding, converter.model.speaker_table[3], atol=1e-5)
    out = converter.convert(ConversionRequest(corpus.records[0].mel, reference, seed=1))
    assert out.shape == corpus.records[0].mel.shape


def test_converter_prefers_stored_speaker_embedder(distiller, corpus):
    assert isinstance(VoiceConverter(distiller.model).embedder, EnvelopeSpeakerEmbedder)
    embedder = ConvSpeakerEmbedder(16, 8).eval()
    converter = VoiceConverter(
        dataclasses.replace(distiller.model, speaker_embedder=embedder)
    )
    assert converter.embedder is embedder
    reference = corpus.records[3].mel
    assert torch.allclose(
        converter.target_embedding(reference), embedder.embed(reference).reshape(-1)
    )

def test_conversion_errors(converter, corpus):
    source = corpus.records[0].mel
    with pytest.raises(ConditioningError):
        converter.convert(ConversionRequest(source, 42))
    with pytest.raises(GeometryError):
        converter.convert(ConversionRequest(torch.zeros(12, 20), 1))
    with pytest.raises(GeometryError):
        converter.convert(ConversionRequest(torch.zeros(16, 0), 1))
    with pytest.raises(GeometryError):
        converter.convert(ConversionRequest(source, torch.zeros(5)))
    with pytest.raises(ConfigurationError):
        converter.convert(ConversionRequest(source, 1, t_prime=10))


def test_converter_from_checkpoint(tmp_path, distiller, tiny_config, corpus):
    path = save_checkpoint(
        distiller.to_checkpoint(tiny_config.snapshot()), tmp_path / "student.pt"
    )
    loaded = VoiceConverter.from_checkpoint(path)
    request = ConversionRequest(corpus.records[5].mel, 0, seed=11)
    assert torch.allclose(
        loaded.convert(request), VoiceConverter(distiller.model).convert(request), atol=1e-6
    )


def test_measure_rtf_report(converter):
    source = torch.randn(16, 87)
    report = measure_rtf(converter, ConversionRequest(source, 0, seed=0), 3, 1, "tiny")
    assert report.frames == 87
    assert report.playback_seconds == pytest.approx(87 * 16 / 8000)
    assert report.processing_seconds > 0
    assert report.rtf == pytest.approx(report.processing_seconds / report.playback_seconds)
    assert report.repetitions == 3 and report.warmup == 1
    assert set(report.params) == {"denoiser", "content_encoder"}
    assert report.to_dict()["model"] == "tiny"


def test_measure_rtf_takes_stage_medians(converter, monkeypatch):
    # start, middle, end per repetition: content [1, 5, 2], denoiser [1, 1, 10]
    ticks = iter([0.0, 1.0, 2.0, 10.0, 15.0, 16.0, 20.0, 22.0, 32.0])
    monkeypatch.setattr(
        "onestepvc.inference.time", types.SimpleNamespace(perf_counter=lambda: next(ticks))
    )
    request = ConversionRequest(torch.randn(16, 10), 0, seed=0)
    report = measure_rtf(converter, request, repetitions=3, warmup=0)
    assert report.content_seconds == 2.0
    assert report.denoiser_seconds == 1.0
    assert report.processing_seconds == 6.0
    assert isinstance(report.processing_seconds, float)

def test_measure_rtf_rejects_bad_arguments(converter):
    request = ConversionRequest(torch.randn(16, 10), 0)
    with pytest.raises(BenchmarkError):
        measure_rtf(converter, request, repetitions=0)
    with pytest.raises(BenchmarkError):
        measure_rtf(converter, request, warmup=-1)
    with pytest.raises(BenchmarkError):
        measure_rtf(converter, ConversionRequest(torch.zeros(16, 0), 0))


def test_compare_models(converter):
    request = ConversionRequest(torch.randn(16, 32), 0, seed=0)
    comparison = compare_models_rtf(converter, converter, request, 2, 0, ("a", "b"))
    assert isinstance(comparison, RtfComparison)
    assert comparison.ratio == pytest.approx(comparison.first.rtf / comparison.second.rtf)
    assert set(comparison.to_dict()) == {"ratio", "content_ratio", "models"}
    table = format_rtf_table([comparison.first, comparison.second])
    assert table.splitlines()[0].split() == ["model", "device", "rtf", "params"]
    assert len(table.splitlines()) == 3


def test_resolve_device():
    assert resolve_device("cpu") == torch.device("cpu")
    if not torch.cuda.is_available() and not torch.backends.mps.is_available():
        with pytest.raises(BenchmarkError):
            resolve_device("accelerator")
