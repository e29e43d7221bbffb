import json

import numpy as np
import pytest
import torch

from onestepvc.config import MelConfig
from onestepvc.data import (
    BatchStream,
    MelNormalizer,
    frame_count,
    generate_synthetic_corpus,
    load_corpus,
    mel_filterbank,
    random_crop,
    save_corpus,
    split_unseen,
    wav_to_logmel,
)
from onestepvc.exceptions import CorpusError


def test_logmel_frame_count_and_floor():
    config = MelConfig()
    silence = np.zeros(22050)
    mel = wav_to_logmel(silence, config)
    assert mel.shape == (80, frame_count(22050, 256)) == (80, 87)
    assert torch.allclose(mel, torch.full_like(mel, float(np.log(1e-5))))


def test_filterbank_peak_matches_tone_bin():
    config = MelConfig()
    basis = mel_filterbank(config)
    fft_bin = round(1000 * config.n_fft / config.sample_rate)
    tone = np.sin(2 * np.pi * 1000 * np.arange(22050) / 22050)
    mel = wav_to_logmel(tone, config)
    peak_band = int(mel[:, 10:-10].mean(dim=1).argmax())
    assert peak_band == int(np.argmax(basis[:, fft_bin]))


def test_logmel_rejects_bad_audio():
    config = MelConfig()
    with pytest.raises(CorpusError):
        wav_to_logmel(np.zeros(0), config)
    with pytest.raises(CorpusError):
        wav_to_logmel(np.array([0.0, np.nan, 0.0]), config)
    with pytest.raises(CorpusError):
        wav_to_logmel(np.zeros((2, 100)), config)


def test_resampling_to_configured_rate():
    config = MelConfig()
    mel = wav_to_logmel(np.zeros(11025), config, sample_rate=11025)
    assert mel.shape[-1] == frame_count(22050, 256)


def test_synthetic_corpus_structure(corpus):
    assert len(corpus) == 4 * 6
    assert corpus.conversion_capable
    for record in corpus.records:
        residual = record.mel.double() - record.mel.double().mean(dim=-1, keepdim=True)
        expected = torch.from_numpy(corpus.trajectory(record.content_id))
        assert torch.allclose(residual, expected, atol=1e-5)


def test_synthetic_speakers_respect_margin(corpus):
    envelopes = [corpus.envelope(k) for k in corpus.speaker_ids]
    for i, a in enumerate(envelopes):
        for b in envelopes[i + 1 :]:
            assert np.sqrt(np.mean((a - b) ** 2)) >= 0.5


def test_synthetic_corpus_is_seeded():
    a = generate_synthetic_corpus(2, 2, 8, 3, n_mels=16, speaker_dim=8)
    b = generate_synthetic_corpus(2, 2, 8, 3, n_mels=16, speaker_dim=8)
    assert all(torch.equal(x.mel, y.mel) for x, y in zip(a.records, b.records))


def test_single_speaker_corpus_is_not_conversion_capable():
    corpus = generate_synthetic_corpus(1, 2, 8, 0, n_mels=16, speaker_dim=8)
    assert not corpus.conversion_capable


def test_impossible_margin_raises():
    with pytest.raises(CorpusError):
        generate_synthetic_corpus(3, 1, 8, 0, n_mels=16, margin=1e6, max_attempts=3)


def test_split_unseen(corpus):
    train, evaluation = split_unseen(corpus.records, [2, 3], [4, 5])
    assert len(evaluation) == 4 and len(train) == 2 * 4
    assert all(r.speaker_id in (2, 3) and r.content_id in (4, 5) for r in evaluation)
    assert all(r.speaker_id < 2 and r.content_id < 4 for r in train)
    assert {r.split for r in evaluation} == {"eval"}
    with pytest.raises(CorpusError):
        split_unseen(corpus.records, [9], [0])


def test_normalizer_roundtrip(corpus):
    normalizer = MelNormalizer.fit(r.mel for r in corpus.records)
    mel = corpus.records[0].mel
    scaled = normalizer.normalize(mel)
    assert float(scaled.min()) >= -1.0 - 1e-6 and float(scaled.max()) <= 1.0 + 1e-6
    assert torch.allclose(normalizer.denormalize(scaled), mel, atol=1e-5)
    with pytest.raises(CorpusError):
        MelNormalizer.fit([torch.zeros(2, 2)])


def test_random_crop_pads_short_mels():
    rng = np.random.default_rng(0)
    mel = torch.arange(6.0).reshape(2, 3)
    crop = random_crop(mel, 5, rng)
    assert crop.shape == (2, 5)
    assert torch.equal(crop[:, 3:], mel[:, 2:].repeat(1, 2))


def test_batch_stream_is_keyed_by_step(corpus):
    a = BatchStream(corpus.records, 4, 16, seed=5)
    b = BatchStream(corpus.records, 4, 16, seed=5)
    batch = a.batch_at(7)
    assert batch.mel.shape == (4, 16, 16)
    assert torch.equal(batch.mel, b.batch_at(7).mel)
    assert torch.equal(batch.speaker_ids, b.batch_at(7).speaker_ids)
    first_epoch = np.concatenate([a.indices_at(i) for i in range(a.steps_per_epoch)])
    assert sorted(first_epoch.tolist()) == list(range(len(corpus)))


def test_corpus_save_load(tmp_path, corpus):
    save_corpus(corpus, tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == len(corpus)
    assert set(json.loads(lines[0])) == {"path", "speaker", "content", "split"}
    loaded = load_corpus(tmp_path)
    assert loaded.speaker_ids == corpus.speaker_ids
    assert loaded.content_ids == corpus.content_ids
    for k in corpus.speaker_ids:
        assert torch.allclose(loaded.speaker_embedding(k), corpus.speaker_embedding(k))
    assert all(torch.equal(x.mel, y.mel) for x, y in zip(loaded.records, corpus.records))


def test_load_corpus_missing(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path)
