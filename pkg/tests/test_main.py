"""Unit tests for onestepvc CLI."""

import json

import numpy as np
import pytest
import torch
import yaml

import onestepvc.__main__ as cli
from onestepvc.__main__ import _speaker_table, build_parser, main
from onestepvc.adapters import write_wav
from onestepvc.checkpoint import TeacherModel, load_checkpoint
from onestepvc.distillation import speaker_table_from_embedder
from onestepvc.logs import read_jsonl
from onestepvc.networks import ConvSpeakerEmbedder


@pytest.fixture
def tiny_yaml(tmp_path, tiny_config, monkeypatch):
    """Desk-scale config file; runs land under tmp_path."""
    monkeypatch.chdir(tmp_path)
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_config.snapshot()))
    return path


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "usage: onestepvc" in capsys.readouterr().out


def test_parser_generates_config_flags():
    args = build_parser().parse_args(
        ["gen-corpus", "--batch-size", "3", "--no-use-inverse", "--mel-scales", "[1, 2]"]
    )
    assert args.batch_size == 3
    assert args.use_inverse is False
    assert args.mel_scales == [1, 2]
    assert not hasattr(args, "learning_rate")


def test_gen_corpus_echoes_flags(tmp_path, tiny_yaml, capsys):
    out = tmp_path / "corpus"
    code = main(
        ["gen-corpus", "--config", str(tiny_yaml), "--out", str(out),
         "--speakers", "3", "--contents", "2", "--frames", "8",
         "--segment-frames", "8", "--seed", "5"]
    )
    assert code == 0
    assert len(list((out / "mels").glob("*.npy"))) == 6
    snapshot = yaml.safe_load((out / "config.yaml").read_text())
    assert snapshot["segment_frames"] == 8
    assert snapshot["seed"] == 5
    assert snapshot["n_mels"] == 16
    [record] = read_jsonl(out / "metrics.jsonl")
    assert record["records"] == 6 and record["phase"] == "corpus"
    assert "Wrote 6 utterances" in capsys.readouterr().out


def test_missing_checkpoint_reports_error(tmp_path, tiny_yaml, capsys):
    code = main(
        ["distill", "--config", str(tiny_yaml), "--teacher", str(tmp_path / "no.pt"),
         "--corpus", str(tmp_path)]
    )
    assert code == 1
    assert "error: CheckpointError" in capsys.readouterr().err


def test_corpus_geometry_mismatch(tmp_path, tiny_yaml, capsys):
    corpus = tmp_path / "corpus"
    assert main(["gen-corpus", "--config", str(tiny_yaml), "--out", str(corpus),
                 "--contents", "2", "--frames", "8"]) == 0
    code = main(["train-teacher", "--config", str(tiny_yaml), "--n-mels", "20",
                 "--corpus", str(corpus), "--no-progress"])
    assert code == 1
    assert "error: GeometryError" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, tiny_yaml):
    cfg = ["--config", str(tiny_yaml), "--no-progress"]
    corpus = tmp_path / "corpus"
    assert main(["gen-corpus", *cfg, "--out", str(corpus),
                 "--contents", "6", "--frames", "24"]) == 0

    teacher_dir = tmp_path / "teacher"
    assert main(["train-teacher", *cfg, "--out", str(teacher_dir),
                 "--corpus", str(corpus)]) == 0
    teacher_ckpt = teacher_dir / "checkpoints" / "teacher-2.pt"
    assert teacher_ckpt.exists()
    phases = {r["phase"] for r in read_jsonl(teacher_dir / "metrics.jsonl")}
    assert phases == {"content", "train", "eval"}

    student_dir = tmp_path / "student"
    assert main(["distill", *cfg, "--out", str(student_dir),
                 "--teacher", str(teacher_ckpt), "--corpus", str(corpus)]) == 0
    student_ckpt = student_dir / "checkpoints" / "student-2.pt"
    assert student_ckpt.exists()

    source = sorted((corpus / "mels").glob("*.npy"))[0]
    output = tmp_path / "converted.npy"
    assert main(["convert", *cfg, "--out", str(tmp_path / "convert"),
                 "--ckpt", str(student_ckpt), "--source", str(source),
                 "--target-id", "1", "--output", str(output)]) == 0
    assert np.load(output).shape == np.load(source).shape

    eval_dir = tmp_path / "eval"
    assert main(["eval", *cfg, "--out", str(eval_dir),
                 "--ckpt", str(student_ckpt), "--corpus", str(corpus)]) == 0
    summary = json.loads((eval_dir / "eval" / "summary.json").read_text())
    # speakers 2, 3 x contents 4, 5, each converted to the other speaker
    assert summary["pair_count"] == 4

    bench_dir = tmp_path / "bench"
    assert main(["bench", *cfg, "--out", str(bench_dir), "--ckpt", str(student_ckpt),
                 "--frames", "20", "--rtf-repetitions", "2", "--rtf-warmup", "0"]) == 0
    rtf = json.loads((bench_dir / "eval" / "rtf.json").read_text())
    assert rtf["models"][0]["frames"] == 20
    assert (bench_dir / "eval" / "rtf_table.txt").exists()


def test_manifest_speaker_table_uses_trained_conv_embedder(tiny_config, corpus, monkeypatch):
    trained = []
    real = cli.train_speaker_embedder

    def spy(*args, **kwargs):
        trained.append(real(*args, **kwargs))
        return trained[-1]

    monkeypatch.setattr(cli, "train_speaker_embedder", spy)
    table, embedder = _speaker_table(None, corpus.records, tiny_config)
    assert isinstance(embedder, ConvSpeakerEmbedder)
    assert trained == [embedder]
    reference = speaker_table_from_embedder(corpus.records, embedder)
    assert sorted(table) == sorted(reference)
    for k, v in table.items():
        assert torch.allclose(v, reference[k])


def test_corpus_speaker_table_needs_no_embedder(tiny_config, corpus):
    records = [r for r in corpus.records if r.speaker_id < 2]
    table, embedder = _speaker_table(corpus, records, tiny_config)
    assert embedder is None
    assert sorted(table) == [0, 1]
    assert torch.equal(table[1], corpus.embedding_table()[1])


def test_manifest_teacher_stores_conv_embedder(tmp_path, tiny_yaml):
    pytest.importorskip("soundfile")
    sr, lines = 8000, []
    for speaker, pitch in (("alice", 220.0), ("bob", 410.0)):
        for content, shape in (("a", 1.0), ("b", 3.0)):
            t = np.arange(sr // 4) / sr
            audio = 0.3 * np.sin(2 * np.pi * pitch * t) * np.sin(np.pi * shape * t * 4) ** 2
            path = tmp_path / f"{speaker}_{content}.wav"
            write_wav(path, audio.astype(np.float32), sr)
            lines.append(json.dumps({"path": path.name, "speaker": speaker, "content": content}))
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")

    out = tmp_path / "teacher"
    assert main(["train-teacher", "--config", str(tiny_yaml), "--no-progress",
                 "--out", str(out), "--manifest", str(manifest)]) == 0
    checkpoint = load_checkpoint(out / "checkpoints" / "teacher-2.pt")
    assert "speaker_embedder" in checkpoint.params
    teacher = TeacherModel.from_checkpoint(checkpoint)
    assert isinstance(teacher.speaker_embedder, ConvSpeakerEmbedder)
    assert sorted(teacher.speaker_table) == [0, 1]
    mel = torch.randn(16, 20)
    assert teacher.speaker_embedder.embed(mel).shape == (1, 8)
