"""Objective evaluation: SECS, the synthetic content oracle and ablation drivers."""

import json
import logging
import re
import shlex
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adapters import write_wav
from .checkpoint import TeacherModel
from .config import OneStepVCConfig
from .data import SyntheticCorpus, UtteranceRecord
from .distillation import train_student
from .exceptions import ConfigurationError, JudgeError, ShapeError
from .inference import ConversionRequest, VoiceConverter
from .interfaces import JudgeProtocol, SpeakerEmbedderProtocol, VocoderProtocol
from .logs import dump_jsonl_line

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.json"
PAIRS_NAME = "pairs.jsonl"
TABLE_NAME = "table.txt"
ABLATION_NAME = "ablation.json"

# Named rows of the component analysis.
ABLATION_VARIANTS: dict[str, dict] = {
    "fastvoicegrad": {"mode": "fastvoicegrad", "trainable_content": False},
    "fastvoicegrad+p": {"mode": "fastvoicegrad", "trainable_content": True},
    "+conversion": {"mode": "adcd", "use_reconversion": False, "use_inverse": False},
    "+reconversion": {"mode": "adcd", "use_reconversion": True, "use_inverse": False},
    "adcd": {"mode": "adcd", "use_reconversion": True, "use_inverse": True},
    "direct": {"mode": "direct"},
}
# The full component row is reported under its incremental name too.
ABLATION_ALIASES = {"+inverse": "adcd"}
_LAYERED = re.compile(r"^(adcd|direct)-L(\d+)$")


def variant_overrides(name: str) -> dict:
    """Config overrides of an ablation row; ``adcd-L1``/``direct-L6`` set layers."""
    name = ABLATION_ALIASES.get(name, name)
    if name in ABLATION_VARIANTS:
        return dict(ABLATION_VARIANTS[name])
    match = _LAYERED.match(name)
    if match:
        overrides = dict(ABLATION_VARIANTS[match.group(1)])
        overrides["content_layers"] = int(match.group(2))
        return overrides
    raise ConfigurationError(
        f"Unknown ablation variant '{name}', expected one of "
        f"{sorted([*ABLATION_VARIANTS, *ABLATION_ALIASES])} or adcd-L<n>/direct-L<n>"
    )


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    value = float(torch.dot(a.reshape(-1).double(), b.reshape(-1).double()))
    return min(1.0, max(-1.0, value))


def secs(
    a: torch.Tensor, b: torch.Tensor, embedder: SpeakerEmbedderProtocol
) -> float:
    """Speaker-encoder cosine similarity of two log-mel utterances."""
    return cosine(embedder.embed(a), embedder.embed(b))


def content_residual(mel: torch.Tensor) -> torch.Tensor:
    """Remove the per-bin time mean (the static envelope) of a log-mel."""
    mel = mel.to(torch.float64)
    return mel - mel.mean(dim=-1, keepdim=True)


def content_preservation_error(
    converted: torch.Tensor, content_id: int, corpus: SyntheticCorpus
) -> float:
    """Mean absolute gap between the converted content and its true trajectory."""
    trajectory = torch.from_numpy(corpus.trajectory(content_id))
    residual = content_residual(converted.squeeze(0) if converted.dim() == 3 else converted)
    if residual.shape != trajectory.shape:
        raise ShapeError(
            f"Converted mel {tuple(residual.shape)} does not match trajectory "
            f"{tuple(trajectory.shape)}"
        )
    return float((residual - trajectory).abs().mean())


def calibrate_content_margin(corpus: SyntheticCorpus, fraction: float = 0.5) -> float:
    """``fraction`` of the smallest error between renderings of different contents."""
    contents = corpus.content_ids
    if len(contents) < 2:
        raise ShapeError("Calibrating a content margin needs at least two contents")
    speaker = corpus.speaker_ids[0]
    errors = [
        content_preservation_error(corpus.render(speaker, j), k, corpus)
        for j in contents
        for k in contents
        if j != k
    ]
    return fraction * min(errors)


@dataclass
class PairRecord:
    source_speaker: int
    target_speaker: int
    content_id: int
    secs_to_target: float
    secs_to_source: float
    content_error: float | None = None
    judge_scores: dict[str, float] = field(default_factory=dict)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.source_speaker, self.target_speaker, self.content_id)


@dataclass
class EvalSummary:
    """Means over every A->B conversion pair of the evaluation split."""

    secs_to_target: float
    secs_to_source: float
    content_preservation: float | None
    content_margin: float | None
    within_margin: float | None
    pairs: list[PairRecord]
    judge_means: dict[str, float] = field(default_factory=dict)

    def to_dict(self, with_pairs: bool = False) -> dict:
        data = asdict(self)
        if not with_pairs:
            data.pop("pairs")
        data["pair_count"] = len(self.pairs)
        return data


class CommandJudge(JudgeProtocol):
    """External judge: runs ``command <wav>`` and reads the last number it prints.

    Plugs in predictors such as a MOS model or an ASR error-rate script.
    """

    def __init__(self, command: str, name: str | None = None, timeout: float = 300.0):
        if not command:
            raise ConfigurationError("Judge command must not be empty")
        self.command = shlex.split(command)
        self.name = name or Path(self.command[0]).stem
        self.timeout = timeout

    def score(self, wav_path: Path) -> float:
        try:
            result = subprocess.run(
                [*self.command, str(wav_path)],
                capture_output=True,
                text=True,
                check=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.SubprocessError) as e:
            raise JudgeError(f"Judge '{self.name}' failed on {wav_path}: {e}") from e
        numbers = re.findall(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?", result.stdout)
        if not numbers:
            raise JudgeError(f"Judge '{self.name}' printed no score for {wav_path}")
        return float(numbers[-1])


def _references(records: list[UtteranceRecord]) -> dict[int, UtteranceRecord]:
    """One reference utterance per speaker (lowest content id)."""
    refs: dict[int, UtteranceRecord] = {}
    for record in sorted(records, key=lambda r: r.key):
        refs.setdefault(record.speaker_id, record)
    return refs


def evaluate_conversions(
    converter: VoiceConverter,
    records: list[UtteranceRecord],
    embedder: SpeakerEmbedderProtocol,
    corpus: SyntheticCorpus | None = None,
    seed: int = 1234,
    judges: list[JudgeProtocol] | None = None,
    vocoder: VocoderProtocol | None = None,
    wav_dir: Path | None = None,
) -> EvalSummary:
    """Convert every eval utterance to every other eval speaker.

    Target speakers are given to the converter as embeddings of a reference
    utterance, so speakers unseen in training can be targets. Pairs are
    processed in sorted key order.
    """
    if judges and (vocoder is None or wav_dir is None):
        raise ConfigurationError("Judges need a vocoder and a WAV output directory")
    refs = _references(records)
    if len(refs) < 2:
        raise ShapeError("Conversion evaluation needs at least two speakers")
    targets = {k: converter.embedder.embed(r.mel).reshape(-1) for k, r in refs.items()}
    margin = calibrate_content_margin(corpus) if corpus is not None else None

    pairs: list[PairRecord] = []
    index = 0
    for record in sorted(records, key=lambda r: r.key):
        for target in sorted(refs):
            if target == record.speaker_id:
                continue
            converted = converter.convert(
                ConversionRequest(record.mel, targets[target], seed=seed + index)
            )
            index += 1
            pair = PairRecord(
                source_speaker=record.speaker_id,
                target_speaker=target,
                content_id=record.content_id,
                secs_to_target=secs(converted, refs[target].mel, embedder),
                secs_to_source=secs(converted, record.mel, embedder),
            )
            if corpus is not None:
                pair.content_error = content_preservation_error(
                    converted, record.content_id, corpus
                )
            if judges:
                wav_dir.mkdir(parents=True, exist_ok=True)
                path = wav_dir / (
                    f"spk{record.speaker_id}_utt{record.content_id}_to_spk{target}.wav"
                )
                audio = vocoder(converted.unsqueeze(0))[0].numpy()
                write_wav(path, audio, converter.sample_rate)
                pair.judge_scores = {j.name: j.score(path) for j in judges}
            pairs.append(pair)

    summary = EvalSummary(
        secs_to_target=float(np.mean([p.secs_to_target for p in pairs])),
        secs_to_source=float(np.mean([p.secs_to_source for p in pairs])),
        content_preservation=None,
        content_margin=margin,
        within_margin=None,
        pairs=pairs,
    )
    if corpus is not None:
        errors = np.array([p.content_error for p in pairs])
        summary.content_preservation = float(errors.mean())
        summary.within_margin = float((errors < margin).mean())
    if judges:
        summary.judge_means = {
            j.name: float(np.mean([p.judge_scores[j.name] for p in pairs]))
            for j in judges
        }
    logger.info(
        f"Evaluated {len(pairs)} pairs: SECS target={summary.secs_to_target:.3f} "
        f"source={summary.secs_to_source:.3f}"
    )
    return summary


def format_table(rows: list[tuple[str, EvalSummary]]) -> str:
    """Aligned plain-text comparison table."""
    header = ("model", "secs_tgt", "secs_src", "content_err", "within_margin")
    lines = [header]
    for name, s in rows:
        lines.append(
            (
                name,
                f"{s.secs_to_target:.4f}",
                f"{s.secs_to_source:.4f}",
                "-" if s.content_preservation is None else f"{s.content_preservation:.4f}",
                "-" if s.within_margin is None else f"{s.within_margin:.3f}",
            )
        )
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
        for line in lines
    ) + "\n"


def write_eval_outputs(summary: EvalSummary, eval_dir: Path, name: str = "model") -> None:
    """Write summary.json, pairs.jsonl and table.txt."""
    eval_dir = Path(eval_dir)
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / SUMMARY_NAME).write_text(
        json.dumps(summary.to_dict(), indent=2, sort_keys=True)
    )
    with open(eval_dir / PAIRS_NAME, "w", encoding="utf-8") as f:
        for pair in sorted(summary.pairs, key=lambda p: p.key):
            f.write(dump_jsonl_line(asdict(pair)))
    (eval_dir / TABLE_NAME).write_text(format_table([(name, summary)]))


@dataclass
class AblationRow:
    """One variant averaged over seeds."""

    variant: str
    seeds: list[int]
    summaries: list[EvalSummary]

    def mean(self, attribute: str) -> float | None:
        values = [getattr(s, attribute) for s in self.summaries]
        if any(v is None for v in values):
            return None
        return float(np.mean(values))

    @property
    def summary(self) -> EvalSummary:
        """Seed-averaged summary (pairs of every seed concatenated)."""
        return EvalSummary(
            secs_to_target=self.mean("secs_to_target"),
            secs_to_source=self.mean("secs_to_source"),
            content_preservation=self.mean("content_preservation"),
            content_margin=self.mean("content_margin"),
            within_margin=self.mean("within_margin"),
            pairs=[p for s in self.summaries for p in s.pairs],
        )


def run_ablation(
    variants: list[str],
    teacher: TeacherModel,
    train_records: list[UtteranceRecord],
    eval_records: list[UtteranceRecord],
    config: OneStepVCConfig,
    embedder: SpeakerEmbedderProtocol,
    corpus: SyntheticCorpus | None = None,
    seeds: list[int] | None = None,
    eval_dir: Path | None = None,
    device: str | torch.device = "cpu",
) -> list[AblationRow]:
    """Distill each variant from one teacher per seed and evaluate it."""
    seeds = seeds or [config.train.seed]
    rows = []
    seen: dict[str, str] = {}
    for variant in variants:
        overrides = variant_overrides(variant)
        key = json.dumps(overrides, sort_keys=True)
        if key in seen:
            logger.warning(f"Ablation {variant} repeats {seen[key]}, skipping it")
            continue
        seen[key] = variant
        summaries = []
        for seed in seeds:
            variant_config = config.derive({**overrides, "seed": seed})
            logger.info(f"Ablation {variant} (seed {seed})")
            distiller = train_student(
                teacher, train_records, variant_config, device=device, progress=False
            )
            converter = VoiceConverter(distiller.model, device)
            summaries.append(
                evaluate_conversions(
                    converter,
                    eval_records,
                    embedder,
                    corpus,
                    seed=config.eval.eval_seed,
                )
            )
        rows.append(AblationRow(variant, list(seeds), summaries))

    if eval_dir is not None:
        write_ablation_outputs(rows, eval_dir)
    return rows


def write_ablation_outputs(rows: list[AblationRow], eval_dir: Path) -> None:
    eval_dir = Path(eval_dir)
    eval_dir.mkdir(parents=True, exist_ok=True)
    data = [
        {
            "variant": row.variant,
            "seeds": row.seeds,
            **row.summary.to_dict(),
            "per_seed": [s.to_dict() for s in row.summaries],
        }
        for row in rows
    ]
    (eval_dir / ABLATION_NAME).write_text(json.dumps(data, indent=2, sort_keys=True))
    (eval_dir / TABLE_NAME).write_text(
        format_table([(row.variant, row.summary) for row in rows])
    )
