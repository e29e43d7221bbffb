"""Mel extraction, the synthetic multi-speaker corpus and dataset utilities.

Synthetic utterances are rendered as ``envelope[speaker][:, None] +
trajectory[content]`` in the log-mel domain. Trajectories have zero time-mean
in every bin, so removing the per-bin time mean of any rendering recovers the
content trajectory exactly, whatever the speaker.
"""

import dataclasses
import functools
import json
import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import librosa
import numpy as np
import torch

from .adapters import read_wav
from .config import MelConfig
from .exceptions import CorpusError
from .networks import EnvelopeSpeakerEmbedder

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
SPEAKERS_NAME = "speakers.json"


@functools.lru_cache(maxsize=8)
def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Mel filterbank [n_mels, n_fft // 2 + 1] for the configured convention."""
    return librosa.filters.mel(
        sr=config.sample_rate,
        n_fft=config.n_fft,
        n_mels=config.n_mels,
        fmin=config.fmin,
        fmax=config.f_max,
        htk=config.filterbank == "htk",
        norm="slaney" if config.filterbank == "slaney" else None,
    )


def frame_count(num_samples: int, hop: int) -> int:
    return math.ceil(num_samples / hop)


def wav_to_logmel(
    waveform: np.ndarray | torch.Tensor,
    config: MelConfig,
    sample_rate: int | None = None,
) -> torch.Tensor:
    """Natural-log mel magnitude spectrogram [n_mels, ceil(len / hop)].

    Args:
        waveform: Mono audio samples.
        config: Mel geometry.
        sample_rate: Rate of ``waveform``; resampled to ``config.sample_rate``
            when it differs.
    """
    audio = np.asarray(
        waveform.detach().cpu().numpy() if isinstance(waveform, torch.Tensor) else waveform,
        dtype=np.float64,
    )
    if audio.ndim != 1:
        raise CorpusError(f"Expected mono audio, got shape {audio.shape}")
    if audio.size == 0:
        raise CorpusError("Cannot extract a mel from empty audio")
    if not np.isfinite(audio).all():
        raise CorpusError("Audio contains NaN or infinite samples")
    if sample_rate is not None and sample_rate != config.sample_rate:
        audio = librosa.resample(
            audio, orig_sr=sample_rate, target_sr=config.sample_rate
        )

    spec = torch.stft(
        torch.from_numpy(audio),
        n_fft=config.n_fft,
        hop_length=config.hop,
        win_length=config.win,
        window=torch.hann_window(config.win, dtype=torch.float64),
        center=True,
        pad_mode="constant",
        return_complex=True,
    ).abs()
    basis = torch.from_numpy(mel_filterbank(config)).to(torch.float64)
    mel = torch.log(torch.clamp(basis @ spec, min=config.log_floor))
    return mel[:, : frame_count(audio.size, config.hop)].to(torch.float32)


@dataclass(frozen=True)
class MelNormalizer:
    """Min-max scaling of log-mels to [-1, 1] with corpus statistics."""

    minimum: float
    maximum: float

    @classmethod
    def fit(cls, mels: Iterable[torch.Tensor]) -> "MelNormalizer":
        lo, hi = math.inf, -math.inf
        for mel in mels:
            lo = min(lo, float(mel.min()))
            hi = max(hi, float(mel.max()))
        if not math.isfinite(lo) or hi <= lo:
            raise CorpusError("Cannot fit a normalizer on empty or constant mels")
        return cls(minimum=lo, maximum=hi)

    def normalize(self, mel: torch.Tensor) -> torch.Tensor:
        return 2.0 * (mel - self.minimum) / (self.maximum - self.minimum) - 1.0

    def denormalize(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel + 1.0) * 0.5 * (self.maximum - self.minimum) + self.minimum

    def to_dict(self) -> dict:
        return {"minimum": self.minimum, "maximum": self.maximum}


@dataclass
class SyntheticSpeakerSpec:
    speaker_id: int
    formant_centers: np.ndarray
    formant_widths: np.ndarray
    formant_gains: np.ndarray
    tilt: float
    pitch_spacing: float
    pitch_depth: float
    embedding: torch.Tensor | None = None

    def envelope(self, n_mels: int, base_level: float = -4.0) -> np.ndarray:
        bins = np.arange(n_mels, dtype=np.float64)
        env = np.full(n_mels, base_level) + self.tilt * bins / n_mels
        for c, w, g in zip(
            self.formant_centers, self.formant_widths, self.formant_gains
        ):
            env += g * np.exp(-0.5 * ((bins - c) / w) ** 2)
        env += self.pitch_depth * np.cos(2.0 * np.pi * bins / self.pitch_spacing)
        return env

    def to_dict(self) -> dict:
        return {
            "speaker_id": self.speaker_id,
            "formant_centers": self.formant_centers.tolist(),
            "formant_widths": self.formant_widths.tolist(),
            "formant_gains": self.formant_gains.tolist(),
            "tilt": self.tilt,
            "pitch_spacing": self.pitch_spacing,
            "pitch_depth": self.pitch_depth,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpeakerSpec":
        return cls(
            speaker_id=int(data["speaker_id"]),
            formant_centers=np.asarray(data["formant_centers"]),
            formant_widths=np.asarray(data["formant_widths"]),
            formant_gains=np.asarray(data["formant_gains"]),
            tilt=float(data["tilt"]),
            pitch_spacing=float(data["pitch_spacing"]),
            pitch_depth=float(data["pitch_depth"]),
        )


@dataclass
class UtteranceRecord:
    mel: torch.Tensor
    speaker_id: int
    content_id: int
    split: str = "train"

    def __post_init__(self):
        if self.mel.dim() != 2 or not torch.isfinite(self.mel).all():
            raise CorpusError(
                f"Utterance mel must be a finite [n_mels, frames] array, "
                f"got shape {tuple(self.mel.shape)}"
            )

    @property
    def key(self) -> tuple[int, int]:
        return (self.speaker_id, self.content_id)


@dataclass
class SyntheticCorpus(Sequence):
    """Records plus the generator registries needed by the content oracle."""

    records: list[UtteranceRecord]
    speakers: dict[int, SyntheticSpeakerSpec]
    trajectories: dict[int, np.ndarray]
    embedder: EnvelopeSpeakerEmbedder
    n_mels: int
    frames: int
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, index):
        return self.records[index]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def speaker_ids(self) -> list[int]:
        return sorted(self.speakers)

    @property
    def content_ids(self) -> list[int]:
        return sorted(self.trajectories)

    @property
    def conversion_capable(self) -> bool:
        return len(self.speakers) >= 2

    def envelope(self, speaker_id: int) -> np.ndarray:
        if speaker_id not in self.speakers:
            raise CorpusError(f"Unknown speaker id {speaker_id}")
        return self.speakers[speaker_id].envelope(self.n_mels)

    def trajectory(self, content_id: int) -> np.ndarray:
        if content_id not in self.trajectories:
            raise CorpusError(f"Unknown content id {content_id}")
        return self.trajectories[content_id]

    def render(self, speaker_id: int, content_id: int) -> torch.Tensor:
        mel = self.envelope(speaker_id)[:, None] + self.trajectory(content_id)
        return torch.from_numpy(mel).to(torch.float32)

    def speaker_embedding(self, speaker_id: int) -> torch.Tensor:
        if speaker_id not in self.speakers:
            raise CorpusError(f"Unknown speaker id {speaker_id}")
        return self.embedder.lookup(speaker_id)

    def embedding_table(self) -> dict[int, torch.Tensor]:
        return {k: self.embedder.lookup(k).to(torch.float32) for k in self.speakers}


def _sample_speaker(
    speaker_id: int, n_mels: int, rng: np.random.Generator
) -> SyntheticSpeakerSpec:
    n_formants = 3
    centers = np.sort(rng.uniform(0.05, 0.9, n_formants)) * n_mels
    return SyntheticSpeakerSpec(
        speaker_id=speaker_id,
        formant_centers=centers,
        formant_widths=rng.uniform(0.03, 0.08, n_formants) * n_mels,
        formant_gains=rng.uniform(1.0, 3.0, n_formants),
        tilt=float(rng.uniform(-2.0, 0.5)),
        pitch_spacing=float(rng.uniform(3.0, 8.0)),
        pitch_depth=float(rng.uniform(0.2, 0.6)),
    )


def _sample_trajectory(
    n_mels: int, frames: int, rng: np.random.Generator, amplitude: float = 1.5
) -> np.ndarray:
    """Piecewise-stationary spectral patterns, smoothed in time, zero-mean per bin."""
    bins = np.arange(n_mels, dtype=np.float64)
    traj = np.zeros((n_mels, frames))
    start = 0
    while start < frames:
        length = int(rng.integers(4, 13))
        pattern = np.zeros(n_mels)
        for _ in range(2):
            center = rng.uniform(0, n_mels)
            width = rng.uniform(0.04, 0.12) * n_mels
            pattern += rng.uniform(-1.0, 1.0) * np.exp(
                -0.5 * ((bins - center) / width) ** 2
            )
        traj[:, start : start + length] = pattern[:, None]
        start += length
    kernel = np.ones(3) / 3.0
    traj = np.stack([np.convolve(row, kernel, mode="same") for row in traj])
    traj -= traj.mean(axis=1, keepdims=True)
    return amplitude * traj


def generate_synthetic_corpus(
    n_speakers: int,
    n_utts: int,
    frames: int,
    rng: np.random.Generator | int,
    n_mels: int = 80,
    speaker_dim: int = 256,
    margin: float = 0.5,
    max_attempts: int = 200,
) -> SyntheticCorpus:
    """Render every content id under every speaker.

    Args:
        n_speakers: Number of synthetic speakers.
        n_utts: Number of content ids; each speaker renders all of them, so the
            corpus holds ``n_speakers * n_utts`` records.
        frames: Frames per utterance.
        rng: Generator or integer seed.
        n_mels: Mel bins.
        speaker_dim: Dimension of the registered speaker embeddings.
        margin: Minimum RMS distance between any two speaker envelopes.
        max_attempts: Resampling budget per speaker before giving up.
    """
    if n_speakers < 1 or n_utts < 1 or frames < 1:
        raise CorpusError("n_speakers, n_utts and frames must be positive")
    seed = rng if isinstance(rng, int) else None
    rng = np.random.default_rng(rng)
    if n_speakers == 1:
        logger.warning("Single-speaker corpus: conversion experiments are disabled")

    speakers: dict[int, SyntheticSpeakerSpec] = {}
    envelopes: list[np.ndarray] = []
    for k in range(n_speakers):
        for _ in range(max_attempts):
            spec = _sample_speaker(k, n_mels, rng)
            env = spec.envelope(n_mels)
            if all(np.sqrt(np.mean((env - e) ** 2)) >= margin for e in envelopes):
                break
        else:
            raise CorpusError(
                f"Could not sample speaker {k} at RMS margin {margin} "
                f"after {max_attempts} attempts"
            )
        speakers[k] = spec
        envelopes.append(env)

    trajectories = {j: _sample_trajectory(n_mels, frames, rng) for j in range(n_utts)}

    embedder = EnvelopeSpeakerEmbedder(n_mels, speaker_dim, seed=0)
    for k, spec in speakers.items():
        spec.embedding = embedder.register(k, torch.from_numpy(envelopes[k]))

    corpus = SyntheticCorpus(
        records=[],
        speakers=speakers,
        trajectories=trajectories,
        embedder=embedder,
        n_mels=n_mels,
        frames=frames,
        seed=seed,
        metadata={"margin": margin},
    )
    corpus.records = [
        UtteranceRecord(mel=corpus.render(k, j), speaker_id=k, content_id=j)
        for k in speakers
        for j in trajectories
    ]
    logger.info(
        f"Generated synthetic corpus: {n_speakers} speakers x {n_utts} contents, "
        f"{frames} frames, {n_mels} mels"
    )
    return corpus


def split_unseen(
    records: Sequence[UtteranceRecord],
    held_out_speakers: Iterable[int],
    held_out_contents: Iterable[int],
) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """Unseen-to-unseen split.

    Returns:
        ``(train, eval)`` where eval holds only held-out speakers x held-out
        contents and train holds neither.
    """
    speakers, contents = set(held_out_speakers), set(held_out_contents)
    if not speakers or not contents:
        raise CorpusError("Held-out speaker and content sets must be nonempty")
    present_speakers = {r.speaker_id for r in records}
    present_contents = {r.content_id for r in records}
    if missing := speakers - present_speakers:
        raise CorpusError(f"Held-out speakers not in corpus: {sorted(missing)}")
    if missing := contents - present_contents:
        raise CorpusError(f"Held-out contents not in corpus: {sorted(missing)}")

    train, evaluation = [], []
    for record in records:
        held_speaker = record.speaker_id in speakers
        held_content = record.content_id in contents
        if held_speaker and held_content:
            evaluation.append(dataclasses.replace(record, split="eval"))
        elif not held_speaker and not held_content:
            train.append(dataclasses.replace(record, split="train"))
    if not train or not evaluation:
        raise CorpusError(
            f"Split produced an empty set (train={len(train)}, eval={len(evaluation)})"
        )
    return train, evaluation


def random_crop(mel: torch.Tensor, frames: int, rng: np.random.Generator) -> torch.Tensor:
    """Random contiguous crop of ``frames`` frames; short mels are edge-padded."""
    total = mel.shape[-1]
    if total < frames:
        return torch.nn.functional.pad(
            mel[None], (0, frames - total), mode="replicate"
        )[0]
    start = int(rng.integers(0, total - frames + 1))
    return mel[..., start : start + frames]


@dataclass
class Batch:
    mel: torch.Tensor
    speaker_ids: torch.Tensor
    content_ids: torch.Tensor


class BatchStream:
    """Deterministic training batches keyed by ``(seed, step)``.

    Each epoch visits a seeded permutation of the records; crops are drawn from
    a generator seeded by the step, so any step can be rebuilt without
    replaying earlier ones (which makes resumed runs bit-identical).
    """

    def __init__(
        self,
        records: Sequence[UtteranceRecord],
        batch_size: int,
        segment_frames: int,
        seed: int,
        normalizer: MelNormalizer | None = None,
    ):
        if not records:
            raise CorpusError("Cannot batch an empty record list")
        self.records = list(records)
        self.batch_size = batch_size
        self.segment_frames = segment_frames
        self.seed = seed
        self.normalizer = normalizer

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.records) // self.batch_size)

    def indices_at(self, step: int) -> np.ndarray:
        epoch, offset = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.records))
        start = offset * self.batch_size
        return perm[np.arange(start, start + self.batch_size) % len(perm)]

    def batch_at(self, step: int) -> Batch:
        rng = np.random.default_rng([self.seed, step, 7])
        chosen = [self.records[i] for i in self.indices_at(step)]
        mel = torch.stack([random_crop(r.mel, self.segment_frames, rng) for r in chosen])
        if self.normalizer is not None:
            mel = self.normalizer.normalize(mel)
        return Batch(
            mel=mel,
            speaker_ids=torch.tensor([r.speaker_id for r in chosen]),
            content_ids=torch.tensor([r.content_id for r in chosen]),
        )

    def __iter__(self) -> Iterator[Batch]:
        step = 0
        while True:
            yield self.batch_at(step)
            step += 1


def save_corpus(corpus: SyntheticCorpus, directory: Path) -> Path:
    """Persist a synthetic corpus as .npy arrays plus a JSONL manifest."""
    directory = Path(directory)
    (directory / "mels").mkdir(parents=True, exist_ok=True)
    (directory / "contents").mkdir(exist_ok=True)
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8") as f:
        for r in corpus.records:
            rel = Path("mels") / f"spk{r.speaker_id:03d}_utt{r.content_id:04d}.npy"
            np.save(directory / rel, r.mel.numpy())
            line = {
                "path": rel.as_posix(),
                "speaker": r.speaker_id,
                "content": r.content_id,
                "split": r.split,
            }
            f.write(json.dumps(line, sort_keys=True) + "\n")
    for j, traj in corpus.trajectories.items():
        np.save(directory / "contents" / f"content{j:04d}.npy", traj)
    meta = {
        "n_mels": corpus.n_mels,
        "frames": corpus.frames,
        "seed": corpus.seed,
        "speaker_dim": corpus.embedder.dim,
        "speakers": [s.to_dict() for s in corpus.speakers.values()],
        **corpus.metadata,
    }
    (directory / SPEAKERS_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))
    logger.info(f"Saved corpus with {len(corpus)} records to {directory}")
    return manifest


def load_corpus(directory: Path) -> SyntheticCorpus:
    """Load a corpus written by :func:`save_corpus`."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    meta_path = directory / SPEAKERS_NAME
    if not manifest.exists() or not meta_path.exists():
        raise CorpusError(f"No synthetic corpus found in {directory}")
    meta = json.loads(meta_path.read_text())
    n_mels = int(meta["n_mels"])
    embedder = EnvelopeSpeakerEmbedder(n_mels, int(meta["speaker_dim"]), seed=0)
    speakers = {}
    for data in meta["speakers"]:
        spec = SyntheticSpeakerSpec.from_dict(data)
        spec.embedding = embedder.register(
            spec.speaker_id, torch.from_numpy(spec.envelope(n_mels))
        )
        speakers[spec.speaker_id] = spec
    trajectories = {
        int(p.stem.removeprefix("content")): np.load(p)
        for p in sorted((directory / "contents").glob("content*.npy"))
    }
    records = []
    for line in manifest.read_text().splitlines():
        entry = json.loads(line)
        records.append(
            UtteranceRecord(
                mel=torch.from_numpy(np.load(directory / entry["path"])),
                speaker_id=int(entry["speaker"]),
                content_id=int(entry["content"]),
                split=entry.get("split", "train"),
            )
        )
    extra = {k: v for k, v in meta.items() if k == "margin"}
    return SyntheticCorpus(
        records=records,
        speakers=speakers,
        trajectories=trajectories,
        embedder=embedder,
        n_mels=n_mels,
        frames=int(meta["frames"]),
        seed=meta.get("seed"),
        metadata=extra,
    )


def load_wav_manifest(manifest: Path, config: MelConfig) -> list[UtteranceRecord]:
    """Read a JSONL manifest of WAV files (path/speaker/content/split).

    String speaker and content labels are mapped to integer ids in sorted
    order.
    """
    manifest = Path(manifest)
    entries = [json.loads(line) for line in manifest.read_text().splitlines() if line]
    if not entries:
        raise CorpusError(f"Manifest {manifest} is empty")
    speaker_ids = {s: i for i, s in enumerate(sorted({str(e["speaker"]) for e in entries}))}
    content_ids = {c: i for i, c in enumerate(sorted({str(e["content"]) for e in entries}))}
    records = []
    for entry in entries:
        path = Path(entry["path"])
        if not path.is_absolute():
            path = manifest.parent / path
        audio, sr = read_wav(path)
        records.append(
            UtteranceRecord(
                mel=wav_to_logmel(audio, config, sample_rate=sr),
                speaker_id=speaker_ids[str(entry["speaker"])],
                content_id=content_ids[str(entry["content"])],
                split=entry.get("split", "train"),
            )
        )
    logger.info(f"Loaded {len(records)} utterances from {manifest}")
    return records
