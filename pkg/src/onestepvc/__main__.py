"""onestepvc CLI - Command line interface for onestepvc.

Usage:
    python -m onestepvc gen-corpus --out runs/corpus      - Render a synthetic corpus
    python -m onestepvc train-teacher --corpus runs/corpus - Train the diffusion teacher
    python -m onestepvc distill --teacher ckpt --mode adcd - Distill a one-step student
    python -m onestepvc convert --ckpt ckpt --source x.npy - Convert one utterance
    python -m onestepvc bench --ckpt a --ckpt b            - Real-time-factor comparison
    python -m onestepvc eval --ckpt ckpt --corpus dir      - Unseen-to-unseen evaluation
    python -m onestepvc ablate --teacher ckpt --corpus dir - Component analysis table

Every flag named after a config key overrides that key (flag > file > env >
default) and is echoed into the run's ``config.yaml``.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .adapters import GriffinLimVocoder, read_wav, write_wav
from .checkpoint import TeacherModel, load_checkpoint
from .config import OneStepVCConfig, flat_fields
from .data import (
    BatchStream,
    MelNormalizer,
    SyntheticCorpus,
    UtteranceRecord,
    generate_synthetic_corpus,
    load_corpus,
    load_wav_manifest,
    save_corpus,
    split_unseen,
    wav_to_logmel,
)
from .distillation import (
    speaker_table_from_embedder,
    train_speaker_embedder,
    train_student,
    train_teacher,
)
from .evaluation import (
    CommandJudge,
    evaluate_conversions,
    format_table,
    run_ablation,
    write_eval_outputs,
)
from .exceptions import BenchmarkError, GeometryError, OneStepVCError
from .inference import (
    ConversionRequest,
    VoiceConverter,
    compare_models_rtf,
    format_rtf_table,
    measure_rtf,
    resolve_device,
)
from .logs import MetricsLogger, RunDirectory, configure_logging
from .networks import ConvSpeakerEmbedder, EnvelopeSpeakerEmbedder

logger = logging.getLogger(__name__)

# Flags handled explicitly instead of being generated from config keys.
GLOBAL_KEYS = ("seed",)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for key, (_, default) in flat_fields().items():
        if key in GLOBAL_KEYS:
            continue
        flag = "--" + key.replace("_", "-")
        kwargs = {"dest": key, "default": argparse.SUPPRESS}
        if isinstance(default, bool):
            kwargs["action"] = argparse.BooleanOptionalAction
        elif isinstance(default, (int, float)):
            kwargs["type"] = type(default)
        elif isinstance(default, tuple):
            kwargs["type"] = yaml.safe_load
            kwargs["metavar"] = "YAML"
        group.add_argument(flag, **kwargs)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, default=None, help="Flat YAML config")
    common.add_argument("--log-level", default="INFO")
    common.add_argument("--out", type=Path, default=None, help="Run directory")
    common.add_argument(
        "--no-progress", action="store_true", help="Disable progress bars"
    )
    _add_config_flags(common)
    return common


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--corpus", type=Path, help="Synthetic corpus directory")
    source.add_argument("--manifest", type=Path, help="JSONL manifest of WAV files")
    parser.add_argument("--held-out-speakers", type=_int_list, default=None)
    parser.add_argument("--held-out-contents", type=_int_list, default=None)
    parser.add_argument(
        "--no-split", action="store_true", help="Train and evaluate on every record"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onestepvc",
        description="onestepvc - one-step diffusion voice conversion by distillation",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")
    common = _common_parser()

    gen = subparsers.add_parser(
        "gen-corpus", parents=[common], help="Render a synthetic multi-speaker corpus"
    )
    gen.add_argument("--speakers", type=int, default=4)
    gen.add_argument("--contents", type=int, default=50, help="Content ids per speaker")
    gen.add_argument("--frames", type=int, default=64)
    gen.add_argument("--margin", type=float, default=0.5)

    teacher = subparsers.add_parser(
        "train-teacher", parents=[common], help="Train the multi-step diffusion teacher"
    )
    _add_data_flags(teacher)

    distill = subparsers.add_parser(
        "distill", parents=[common], help="Distill a one-step student from a teacher"
    )
    distill.add_argument("--teacher", type=Path, required=True)
    distill.add_argument("--resume", type=Path, default=None)
    _add_data_flags(distill)

    convert = subparsers.add_parser(
        "convert", parents=[common], help="Convert one utterance with a student"
    )
    convert.add_argument("--ckpt", type=Path, required=True)
    convert.add_argument("--source", type=Path, required=True, help=".npy mel or .wav")
    target = convert.add_mutually_exclusive_group(required=True)
    target.add_argument("--target-id", type=int)
    target.add_argument("--target-ref", type=Path, help=".npy mel or .wav reference")
    convert.add_argument("--output", type=Path, required=True, help=".npy or .wav")

    bench = subparsers.add_parser(
        "bench", parents=[common], help="Measure real-time factors of students"
    )
    bench.add_argument("--ckpt", type=Path, action="append", required=True)
    bench.add_argument("--device", default="cpu", help="cpu, accelerator or a torch device")
    bench.add_argument("--frames", type=int, default=87)
    bench.add_argument("--source", type=Path, default=None)

    evaluate = subparsers.add_parser(
        "eval", parents=[common], help="Evaluate a student on the unseen split"
    )
    evaluate.add_argument("--ckpt", type=Path, required=True)
    evaluate.add_argument(
        "--verifier", choices=("envelope", "conv"), default="envelope"
    )
    _add_data_flags(evaluate)

    ablate = subparsers.add_parser(
        "ablate", parents=[common], help="Distill and evaluate several variants"
    )
    ablate.add_argument("--teacher", type=Path, required=True)
    ablate.add_argument(
        "--variants",
        default="fastvoicegrad+p,+conversion,+reconversion,+inverse",
        help="Comma-separated variants (e.g. adcd-L1,direct-L1); +inverse is adcd",
    )
    ablate.add_argument("--seeds", type=_int_list, default=None)
    _add_data_flags(ablate)
    return parser


def _load_config(args: argparse.Namespace) -> OneStepVCConfig:
    overrides = {
        key: getattr(args, key) for key in flat_fields() if hasattr(args, key)
    }
    config = OneStepVCConfig(config_path=args.config, overrides=overrides)
    for warning in config.validate():
        logger.warning(warning)
    return config


def _run_dir(args: argparse.Namespace, config: OneStepVCConfig) -> RunDirectory:
    path = args.out or config.runs_root / args.command
    return RunDirectory(path).create(config.snapshot())


def _load_records(
    args: argparse.Namespace, config: OneStepVCConfig
) -> tuple[SyntheticCorpus | None, list[UtteranceRecord]]:
    if args.corpus is not None:
        corpus = load_corpus(args.corpus)
        if corpus.n_mels != config.mel.n_mels:
            raise GeometryError(
                f"Corpus has {corpus.n_mels} mel bins, config asks for "
                f"{config.mel.n_mels}"
            )
        return corpus, list(corpus.records)
    return None, load_wav_manifest(args.manifest, config.mel)


def _split(
    args: argparse.Namespace, records: list[UtteranceRecord]
) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """Unseen-to-unseen split; by default the last two speakers and contents."""
    if args.no_split:
        return records, records
    speakers = sorted({r.speaker_id for r in records})
    contents = sorted({r.content_id for r in records})
    held_speakers = args.held_out_speakers or speakers[-2:]
    held_contents = args.held_out_contents or contents[-2:]
    if args.held_out_speakers is None and len(speakers) < 4:
        logger.warning("Fewer than 4 speakers: training and evaluating on every record")
        return records, records
    return split_unseen(records, held_speakers, held_contents)


def _speaker_table(
    corpus: SyntheticCorpus | None,
    records: list[UtteranceRecord],
    config: OneStepVCConfig,
) -> tuple[dict[int, torch.Tensor], ConvSpeakerEmbedder | None]:
    """Speaker embeddings of the training speakers.

    Synthetic corpora carry their ground-truth embeddings. Real audio gets a
    convolutional embedder trained on the training split, returned alongside
    the table so it can be stored with the teacher.
    """
    dim = config.network.speaker_dim
    if corpus is not None:
        if corpus.embedder.dim != dim:
            raise GeometryError(
                f"Corpus speaker embeddings have {corpus.embedder.dim} values, "
                f"config asks for {dim}"
            )
        train_speakers = {r.speaker_id for r in records}
        table = corpus.embedding_table()
        return {k: v for k, v in table.items() if k in train_speakers}, None
    embedder = train_speaker_embedder(records, config.mel.n_mels, dim, config.train)
    return speaker_table_from_embedder(records, embedder), embedder


def _read_mel(path: Path, config: OneStepVCConfig) -> torch.Tensor:
    if path.suffix == ".npy":
        return torch.from_numpy(np.load(path)).to(torch.float32)
    audio, sr = read_wav(path)
    return wav_to_logmel(audio, config.mel, sample_rate=sr)


def cmd_gen_corpus(args, config: OneStepVCConfig) -> None:
    run_dir = _run_dir(args, config)
    corpus = generate_synthetic_corpus(
        args.speakers,
        args.contents,
        args.frames,
        config.train.seed,
        n_mels=config.mel.n_mels,
        speaker_dim=config.network.speaker_dim,
        margin=args.margin,
    )
    save_corpus(corpus, run_dir.path)
    with MetricsLogger(run_dir) as metrics:
        metrics.log(
            0,
            {
                "records": len(corpus),
                "speakers": len(corpus.speakers),
                "contents": len(corpus.trajectories),
                "conversion_capable": corpus.conversion_capable,
            },
            phase="corpus",
        )
    print(f"Wrote {len(corpus)} utterances to {run_dir.path}")


def cmd_train_teacher(args, config: OneStepVCConfig) -> None:
    run_dir = _run_dir(args, config)
    corpus, records = _load_records(args, config)
    train, _ = _split(args, records)
    normalizer = MelNormalizer.fit(r.mel for r in train)
    table, embedder = _speaker_table(corpus, train, config)
    # held-out contents of the training speakers; unseen speakers have no embedding
    train_keys = {r.key for r in train}
    held_contents = [
        r for r in records if r.speaker_id in table and r.key not in train_keys
    ]
    with MetricsLogger(run_dir) as metrics:
        trainer = train_teacher(
            train,
            config,
            table,
            normalizer,
            run_dir=run_dir,
            metrics=metrics,
            progress=not args.no_progress,
            speaker_embedder=embedder,
        )
        if held_contents:
            held_stream = BatchStream(
                held_contents,
                config.train.batch_size,
                config.train.segment_frames,
                config.eval.eval_seed,
                normalizer,
            )
            held_loss = trainer.evaluate(held_stream)
            metrics.log(trainer.step_count, {"ddpm_heldout": held_loss}, phase="eval")
    print(f"Teacher checkpoint: {run_dir.latest_checkpoint('teacher')}")


def cmd_distill(args, config: OneStepVCConfig) -> None:
    run_dir = _run_dir(args, config)
    teacher = TeacherModel.from_checkpoint(load_checkpoint(args.teacher))
    _, records = _load_records(args, config)
    train, _ = _split(args, records)
    resume = load_checkpoint(args.resume) if args.resume else None
    with MetricsLogger(run_dir, append=resume is not None) as metrics:
        train_student(
            teacher,
            train,
            config,
            run_dir=run_dir,
            metrics=metrics,
            resume=resume,
            progress=not args.no_progress,
        )
    print(f"Student checkpoint: {run_dir.latest_checkpoint('student')}")


def cmd_convert(args, config: OneStepVCConfig) -> None:
    run_dir = _run_dir(args, config)
    converter = VoiceConverter.from_checkpoint(args.ckpt)
    mel_config = converter.model.mel_config
    source = _read_mel(args.source, config)
    if args.target_id is not None:
        target = args.target_id
    else:
        target = _read_mel(args.target_ref, config)
    converted = converter.convert(
        ConversionRequest(source, target, seed=config.train.seed)
    )
    args.output.parent.mkdir(parents=True, exist_ok=True)
    if args.output.suffix == ".wav":
        audio = GriffinLimVocoder(mel_config)(converted.unsqueeze(0))[0].numpy()
        write_wav(args.output, audio, mel_config.sample_rate)
    else:
        np.save(args.output, converted.numpy())
    with MetricsLogger(run_dir) as metrics:
        metrics.log(0, {"frames": int(converted.shape[-1])}, phase="convert")
    print(f"Converted mel written to {args.output}")


def cmd_bench(args, config: OneStepVCConfig) -> None:
    run_dir = _run_dir(args, config)
    if len(args.ckpt) > 2:
        raise BenchmarkError("bench compares at most two checkpoints")
    device = resolve_device(args.device)
    converters = [VoiceConverter.from_checkpoint(p, device) for p in args.ckpt]
    model = converters[0].model
    if args.source is not None:
        source = _read_mel(args.source, config)
    else:
        generator = torch.Generator().manual_seed(config.train.seed)
        source = torch.randn(model.mel_config.n_mels, args.frames, generator=generator)
    target = next(iter(sorted(model.speaker_table)), None)
    request = ConversionRequest(
        source,
        target if target is not None else torch.zeros(model.network_config.speaker_dim),
        seed=config.train.seed,
    )
    repetitions, warmup = config.eval.rtf_repetitions, config.eval.rtf_warmup
    names = [p.stem for p in args.ckpt]
    if len(converters) == 2:
        comparison = compare_models_rtf(
            *converters, request, repetitions, warmup, names=tuple(names)
        )
        reports = [comparison.first, comparison.second]
        result = comparison.to_dict()
    else:
        reports = [measure_rtf(converters[0], request, repetitions, warmup, names[0])]
        result = {"models": [reports[0].to_dict()]}
    run_dir.eval_dir.mkdir(parents=True, exist_ok=True)
    (run_dir.eval_dir / "rtf.json").write_text(json.dumps(result, indent=2))
    table = format_rtf_table(reports)
    (run_dir.eval_dir / "rtf_table.txt").write_text(table)
    with MetricsLogger(run_dir) as metrics:
        for i, report in enumerate(reports):
            metrics.log(i, {"model": report.model, "rtf": report.rtf}, phase="bench")
    print(table, end="")
    if "ratio" in result:
        print(f"speedup: {result['ratio']:.3f}")


def cmd_eval(args, config: OneStepVCConfig) -> None:
    run_dir = _run_dir(args, config)
    converter = VoiceConverter.from_checkpoint(args.ckpt)
    corpus, records = _load_records(args, config)
    train, held_out = _split(args, records)
    mel = converter.model.mel_config
    if args.verifier == "conv":
        verifier = train_speaker_embedder(
            train, mel.n_mels, converter.model.network_config.speaker_dim, config.train
        )
    else:
        verifier = EnvelopeSpeakerEmbedder(
            mel.n_mels, converter.model.network_config.speaker_dim
        )
    judges = []
    if config.eval.judge_command:
        judges.append(CommandJudge(config.eval.judge_command))
    summary = evaluate_conversions(
        converter,
        held_out,
        verifier,
        corpus,
        seed=config.eval.eval_seed,
        judges=judges,
        vocoder=GriffinLimVocoder(mel) if judges else None,
        wav_dir=run_dir.eval_dir / "wavs" if judges else None,
    )
    write_eval_outputs(summary, run_dir.eval_dir, name=args.ckpt.stem)
    with MetricsLogger(run_dir) as metrics:
        metrics.log(0, summary.to_dict(), phase="eval")
    print(format_table([(args.ckpt.stem, summary)]), end="")


def cmd_ablate(args, config: OneStepVCConfig) -> None:
    run_dir = _run_dir(args, config)
    teacher = TeacherModel.from_checkpoint(load_checkpoint(args.teacher))
    corpus, records = _load_records(args, config)
    train, held_out = _split(args, records)
    embedder = EnvelopeSpeakerEmbedder(
        teacher.mel_config.n_mels, teacher.network_config.speaker_dim
    )
    rows = run_ablation(
        [v.strip() for v in args.variants.split(",") if v.strip()],
        teacher,
        train,
        held_out,
        config,
        embedder,
        corpus,
        seeds=args.seeds,
        eval_dir=run_dir.eval_dir,
    )
    with MetricsLogger(run_dir) as metrics:
        for i, row in enumerate(rows):
            metrics.log(i, {"variant": row.variant, **row.summary.to_dict()}, phase="ablate")
    print(format_table([(row.variant, row.summary) for row in rows]), end="")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "convert": cmd_convert,
    "bench": cmd_bench,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    """Main entry point for the onestepvc CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 1

    configure_logging(args.log_level)
    try:
        config = _load_config(args)
        COMMANDS[args.command](args, config)
    except OneStepVCError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
