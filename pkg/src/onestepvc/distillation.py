"""Teacher training, batch speaker conditioning and the one-step distillation loops.

All per-step randomness (diffusion steps, noise, speaker shuffles) is drawn from
generators keyed by ``(seed, step)``, so a run resumed from a checkpoint
continues exactly as the uninterrupted run would have.
"""

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from .adapters import get_default_vocoder
from .checkpoint import (
    Checkpoint,
    StudentModel,
    TeacherModel,
    load_params,
    restore_rng_state,
    save_checkpoint,
)
from .config import (
    DiffusionConfig,
    MelConfig,
    NetworkConfig,
    OneStepVCConfig,
    TrainConfig,
)
from .data import BatchStream, MelNormalizer, UtteranceRecord
from .diffusion import make_schedule, sample_steps
from .discriminators import build_discriminator
from .exceptions import (
    CheckpointError,
    ConditioningError,
    ConfigurationError,
    DivergenceError,
    ShapeError,
)
from .inference import one_step_convert
from .interfaces import SpeakerEmbedderProtocol, VocoderProtocol
from .logs import MetricsLogger, RunDirectory
from .losses import (
    MODE_TERMS,
    LossReport,
    adv_loss_discriminator,
    adv_loss_generator,
    content_alignment_loss,
    ddpm_loss,
    feature_matching_loss,
    inverse_score_distillation_loss,
    score_distillation_loss,
    total_generator_loss,
)
from .networks import (
    ContentAutoencoder,
    ContentDecoder,
    ConvSpeakerEmbedder,
    TeacherContentEncoder,
    build_content_encoder,
    build_denoiser,
    build_teacher_content_encoder,
)

logger = logging.getLogger(__name__)

DERANGEMENT_ATTEMPTS = 32


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    """Torch generator for one training step, independent of global RNG state."""
    state = int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])
    return torch.Generator().manual_seed(state)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 11])


def _normal_like(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    return torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)


# ---------------------------------------------------------------------------
# Batch speaker conditioning
# ---------------------------------------------------------------------------


@dataclass
class BatchConditioning:
    """Speaker embeddings used by one training step.

    ``s_tgt`` is a speaker-level derangement of ``s_src``, ``s_tgt2`` a
    derangement of ``s_tgt``, and ``s_inv``/``s_inv2`` are drawn from batch
    rows whose speaker differs from ``s_tgt``/``s_tgt2``. In degraded mode
    (single-speaker batch) every field equals ``s_src``.
    """

    s_src: torch.Tensor
    s_tgt: torch.Tensor
    s_tgt2: torch.Tensor
    s_inv: torch.Tensor
    s_inv2: torch.Tensor
    src_ids: np.ndarray
    tgt_ids: np.ndarray
    tgt2_ids: np.ndarray
    inv_ids: np.ndarray
    inv2_ids: np.ndarray
    degraded: bool = False

    def check(self) -> None:
        """Raise ConditioningError if a speaker invariant is violated."""
        if self.degraded:
            return
        pairs = (
            ("s_tgt", self.tgt_ids, self.src_ids),
            ("s_tgt2", self.tgt2_ids, self.tgt_ids),
            ("s_inv", self.inv_ids, self.tgt_ids),
            ("s_inv2", self.inv2_ids, self.tgt2_ids),
        )
        for name, ids, reference in pairs:
            bad = np.flatnonzero(ids == reference)
            if bad.size:
                raise ConditioningError(
                    f"{name} repeats the reference speaker at rows {bad.tolist()}"
                )


def _speaker_derangement(ids: np.ndarray, rng: np.random.Generator) -> np.ndarray | None:
    """Row permutation moving every row to a row of another speaker.

    Returns None when no such permutation exists (one speaker holds more than
    half of the batch).
    """
    n = len(ids)
    for _ in range(DERANGEMENT_ATTEMPTS):
        perm = rng.permutation(n)
        if np.all(ids[perm] != ids):
            return perm
    _, counts = np.unique(ids, return_counts=True)
    shift = int(counts.max())
    if shift > n - shift:
        return None
    # group rows by speaker in random order, then rotate by the largest group
    order = rng.permutation(n)
    order = order[np.argsort(ids[order], kind="stable")]
    perm = np.empty(n, dtype=np.int64)
    perm[order] = order[(np.arange(n) + shift) % n]
    return perm


def _sample_other_speaker(
    reference: np.ndarray, ids: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """For each reference speaker, a uniformly drawn row of a different speaker."""
    chosen = np.empty(len(reference), dtype=np.int64)
    for i, speaker in enumerate(reference):
        candidates = np.flatnonzero(ids != speaker)
        chosen[i] = candidates[rng.integers(len(candidates))]
    return chosen


def _shuffle_rows(ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    perm = _speaker_derangement(ids, rng)
    if perm is None:
        logger.debug("No speaker derangement exists for this batch; sampling rows")
        perm = _sample_other_speaker(ids, ids, rng)
    return perm


def build_batch_conditioning(
    speaker_ids: torch.Tensor | np.ndarray | list[int],
    embeddings: torch.Tensor,
    rng: np.random.Generator,
    strict: bool = False,
) -> BatchConditioning:
    """Shuffle the batch's speaker embeddings into target and repulsive sets.

    Args:
        speaker_ids: Speaker id per batch row.
        embeddings: Source speaker embeddings [B, d].
        rng: Generator driving the shuffles.
        strict: Raise on single-speaker batches instead of falling back to
            reconstruction.
    """
    ids = np.asarray(torch.as_tensor(speaker_ids).cpu(), dtype=np.int64)
    if embeddings.dim() != 2 or embeddings.shape[0] != len(ids):
        raise ShapeError(
            f"Expected embeddings [{len(ids)}, d], got {tuple(embeddings.shape)}"
        )
    if len(np.unique(ids)) < 2:
        if strict:
            raise ConditioningError(
                "Batch holds a single speaker; conversion conditioning is impossible"
            )
        logger.warning("Single-speaker batch: falling back to reconstruction")
        return BatchConditioning(
            *(embeddings,) * 5, *(ids,) * 5, degraded=True
        )

    tgt = _shuffle_rows(ids, rng)
    tgt_ids = ids[tgt]
    tgt2 = _shuffle_rows(tgt_ids, rng)
    tgt2_ids = tgt_ids[tgt2]
    inv = _sample_other_speaker(tgt_ids, ids, rng)
    inv2 = _sample_other_speaker(tgt2_ids, ids, rng)

    def rows(index: np.ndarray) -> torch.Tensor:
        return embeddings[torch.as_tensor(index, device=embeddings.device)]

    s_tgt = rows(tgt)
    conditioning = BatchConditioning(
        s_src=embeddings,
        s_tgt=s_tgt,
        s_tgt2=s_tgt[torch.as_tensor(tgt2, device=embeddings.device)],
        s_inv=rows(inv),
        s_inv2=rows(inv2),
        src_ids=ids,
        tgt_ids=tgt_ids,
        tgt2_ids=tgt2_ids,
        inv_ids=ids[inv],
        inv2_ids=ids[inv2],
    )
    conditioning.check()
    return conditioning


def speaker_vectors(
    table: dict[int, torch.Tensor], speaker_ids: torch.Tensor, device: torch.device
) -> torch.Tensor:
    try:
        rows = [table[int(i)] for i in speaker_ids]
    except KeyError as e:
        raise ConditioningError(f"Speaker {e.args[0]} has no embedding") from e
    return torch.stack(rows).to(device=device, dtype=torch.float32)


# ---------------------------------------------------------------------------
# Training loop scaffolding
# ---------------------------------------------------------------------------


class _Trainer:
    """Shared step loop: logging, checkpointing and progress reporting."""

    kind = "model"

    def __init__(self, train: TrainConfig, device: str | torch.device = "cpu"):
        self.config = train
        self.device = torch.device(device)
        self.step_count = 0

    def step(self, batch, step: int) -> LossReport:
        raise NotImplementedError

    def to_checkpoint(self, config: dict[str, Any]) -> Checkpoint:
        raise NotImplementedError

    def fit(
        self,
        stream: BatchStream,
        steps: int,
        metrics: MetricsLogger | None = None,
        run_dir: RunDirectory | None = None,
        snapshot: dict[str, Any] | None = None,
        progress: bool = True,
    ) -> LossReport | None:
        """Run steps ``step_count .. steps - 1``; returns the last report."""
        last = None
        every = self.config.checkpoint_every
        for step in tqdm(
            range(self.step_count, steps),
            desc=self.kind,
            initial=self.step_count,
            total=steps,
            disable=not progress,
        ):
            batch = stream.batch_at(step)
            started = time.perf_counter()
            report = self.step(batch, step)
            elapsed = time.perf_counter() - started
            self.step_count = step + 1
            if metrics is not None and step % max(self.config.log_every, 1) == 0:
                metrics.log(step, report.as_record(), elapsed)
            if run_dir is not None and every and self.step_count % every == 0:
                self.save(run_dir, snapshot or {})
            last = report
        if metrics is not None:
            metrics.flush()
        return last

    def save(self, run_dir: RunDirectory, snapshot: dict[str, Any]):
        return save_checkpoint(
            self.to_checkpoint(snapshot),
            run_dir.checkpoint_path(self.kind, self.step_count),
        )


def total_steps(train: TrainConfig, stream: BatchStream) -> int:
    return train.steps if train.steps > 0 else train.epochs * stream.steps_per_epoch


def _adam(params, train: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        params, lr=train.learning_rate, betas=(train.adam_beta1, train.adam_beta2)
    )


def _backward(optimizer: torch.optim.Optimizer, loss: torch.Tensor, name: str):
    if not torch.isfinite(loss):
        raise DivergenceError(f"Non-finite {name} loss: {float(loss)}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()


# ---------------------------------------------------------------------------
# Teacher
# ---------------------------------------------------------------------------


def pretrain_content_encoder(
    stream: BatchStream,
    n_mels: int,
    network: NetworkConfig,
    speaker_table: dict[int, torch.Tensor],
    train: TrainConfig,
    steps: int | None = None,
    metrics: MetricsLogger | None = None,
    device: str | torch.device = "cpu",
    progress: bool = False,
) -> TeacherContentEncoder:
    """Train the teacher content encoder as the bottleneck of a mel autoencoder.

    The decoder sees the speaker embedding, so the bottleneck only needs to
    carry what the embedding does not.
    """
    device = torch.device(device)
    steps = train.content_pretrain_steps if steps is None else steps
    encoder = build_teacher_content_encoder(n_mels, network)
    autoencoder = ContentAutoencoder(encoder, ContentDecoder(n_mels, network)).to(device)
    optimizer = _adam(autoencoder.parameters(), train)
    for step in tqdm(range(steps), desc="content", disable=not progress):
        batch = stream.batch_at(step)
        x0 = batch.mel.to(device)
        s = speaker_vectors(speaker_table, batch.speaker_ids, device)
        loss = F.l1_loss(autoencoder(x0, s), x0)
        _backward(optimizer, loss, "content reconstruction")
        if metrics is not None and step % max(train.log_every, 1) == 0:
            metrics.log(step, {"content_recon": float(loss)}, phase="content")
    logger.info(f"Pretrained teacher content encoder for {steps} steps")
    encoder.eval().requires_grad_(False)
    return encoder


def train_speaker_embedder(
    records: list[UtteranceRecord],
    n_mels: int,
    dim: int,
    train: TrainConfig,
    steps: int | None = None,
    device: str | torch.device = "cpu",
) -> ConvSpeakerEmbedder:
    """Train the convolutional embedder with a speaker-classification head."""
    device = torch.device(device)
    steps = train.speaker_embedder_steps if steps is None else steps
    labels = {k: i for i, k in enumerate(sorted({r.speaker_id for r in records}))}
    if len(labels) < 2:
        raise ConfigurationError("Speaker embedder training needs at least 2 speakers")
    stream = BatchStream(records, train.batch_size, train.segment_frames, train.seed)
    embedder = ConvSpeakerEmbedder(n_mels, dim).to(device)
    classifier = nn.Linear(dim, len(labels)).to(device)
    optimizer = _adam([*embedder.parameters(), *classifier.parameters()], train)
    for step in range(steps):
        batch = stream.batch_at(step)
        target = torch.tensor([labels[int(i)] for i in batch.speaker_ids], device=device)
        # unit-norm embeddings need a logit scale to reach confident predictions
        logits = 10.0 * classifier(embedder(batch.mel.to(device)))
        _backward(optimizer, F.cross_entropy(logits, target), "speaker classification")
    embedder.eval()
    logger.info(f"Trained speaker embedder on {len(labels)} speakers for {steps} steps")
    return embedder


@torch.no_grad()
def speaker_table_from_embedder(
    records: list[UtteranceRecord],
    embedder: SpeakerEmbedderProtocol,
) -> dict[int, torch.Tensor]:
    """Mean unit embedding per speaker, from raw log-mels."""
    sums: dict[int, torch.Tensor] = {}
    for record in records:
        vector = embedder.embed(record.mel).squeeze(0).cpu()
        sums[record.speaker_id] = sums.get(record.speaker_id, 0) + vector
    return {k: v / v.norm().clamp_min(1e-12) for k, v in sorted(sums.items())}


class TeacherTrainer(_Trainer):
    """DDPM training of the teacher denoiser on top of a frozen content encoder."""

    kind = "teacher"

    def __init__(
        self,
        mel: MelConfig,
        network: NetworkConfig,
        diffusion: DiffusionConfig,
        train: TrainConfig,
        content_encoder: TeacherContentEncoder,
        speaker_table: dict[int, torch.Tensor],
        normalizer: MelNormalizer | None = None,
        device: str | torch.device = "cpu",
        speaker_embedder: ConvSpeakerEmbedder | None = None,
    ):
        super().__init__(train, device)
        self.mel = mel
        self.network = network
        self.schedule = make_schedule(
            diffusion.timesteps,
            diffusion.beta_start,
            diffusion.beta_end,
            diffusion.schedule_kind,
        )
        self.denoiser = build_denoiser(mel.n_mels, network).to(self.device)
        self.content_encoder = content_encoder.to(self.device).eval()
        self.content_encoder.requires_grad_(False)
        self.speaker_table = speaker_table
        self.normalizer = normalizer
        self.speaker_embedder = speaker_embedder
        self.optimizer = _adam(self.denoiser.parameters(), train)

    def _draw(self, x0: torch.Tensor, generator: torch.Generator):
        t = sample_steps(x0.shape[0], self.schedule.T, generator).to(self.device)
        return t, _normal_like(x0, generator)

    def ddpm_loss_at(self, batch, step: int) -> torch.Tensor:
        generator = step_generator(self.config.seed, step)
        x0 = batch.mel.to(self.device)
        s = speaker_vectors(self.speaker_table, batch.speaker_ids, self.device)
        with torch.no_grad():
            p = self.content_encoder(x0)
        t, noise = self._draw(x0, generator)
        return ddpm_loss(x0, t, noise, self.denoiser, s, p, self.schedule)

    def step(self, batch, step: int) -> LossReport:
        self.denoiser.train()
        loss = self.ddpm_loss_at(batch, step)
        _backward(self.optimizer, loss, "DDPM")
        value = loss.detach()
        return LossReport(terms={"ddpm": value}, weights={"ddpm": 1.0}, total=value)

    @torch.no_grad()
    def evaluate(self, stream: BatchStream, batches: int = 4) -> float:
        """Mean DDPM loss over fixed held-out batches."""
        self.denoiser.eval()
        losses = [float(self.ddpm_loss_at(stream.batch_at(i), i)) for i in range(batches)]
        self.denoiser.train()
        return float(np.mean(losses))

    @property
    def model(self) -> TeacherModel:
        return TeacherModel(
            denoiser=self.denoiser,
            content_encoder=self.content_encoder,
            schedule=self.schedule,
            mel_config=self.mel,
            network_config=self.network,
            speaker_table=self.speaker_table,
            normalizer=self.normalizer,
            speaker_embedder=self.speaker_embedder,
        )

    def to_checkpoint(self, config: dict[str, Any]) -> Checkpoint:
        return self.model.to_checkpoint(
            config,
            step=self.step_count,
            optimizers={"denoiser": self.optimizer.state_dict()},
        )

    def load_state(self, checkpoint: Checkpoint) -> "TeacherTrainer":
        """Restore parameters, optimizer state and step counter for resuming."""
        if checkpoint.kind != "teacher":
            raise CheckpointError(f"Cannot resume a teacher from '{checkpoint.kind}'")
        load_params(self.denoiser, checkpoint, "denoiser")
        load_params(self.content_encoder, checkpoint, "content_encoder")
        if "denoiser" in checkpoint.optimizers:
            self.optimizer.load_state_dict(checkpoint.optimizers["denoiser"])
        restore_rng_state(checkpoint.rng)
        self.step_count = checkpoint.step
        return self

    @classmethod
    def from_checkpoint(
        cls,
        checkpoint: Checkpoint,
        train: TrainConfig,
        device: str | torch.device = "cpu",
    ) -> "TeacherTrainer":
        model = TeacherModel.from_checkpoint(checkpoint)
        trainer = cls(
            model.mel_config,
            model.network_config,
            DiffusionConfig(
                timesteps=model.schedule.T,
                beta_start=model.schedule.beta_start,
                beta_end=model.schedule.beta_end,
                schedule_kind=model.schedule.kind,
            ),
            train,
            model.content_encoder,
            model.speaker_table,
            model.normalizer,
            device,
            speaker_embedder=model.speaker_embedder,
        )
        return trainer.load_state(checkpoint)


def train_teacher(
    records: list[UtteranceRecord],
    config: OneStepVCConfig,
    speaker_table: dict[int, torch.Tensor],
    normalizer: MelNormalizer | None = None,
    run_dir: RunDirectory | None = None,
    metrics: MetricsLogger | None = None,
    device: str | torch.device = "cpu",
    progress: bool = True,
    speaker_embedder: ConvSpeakerEmbedder | None = None,
) -> TeacherTrainer:
    """Pretrain the content encoder, then train the teacher denoiser with DDPM.

    A ``speaker_embedder`` that built ``speaker_table`` travels with the
    checkpoint so conversion can embed unseen target speakers the same way.
    """
    config.validate()
    train, mel, network = config.train, config.mel, config.network
    seed_everything(train.seed)
    stream = BatchStream(
        records, train.batch_size, train.segment_frames, train.seed, normalizer
    )
    content = pretrain_content_encoder(
        stream,
        mel.n_mels,
        network,
        speaker_table,
        train,
        metrics=metrics,
        device=device,
        progress=progress,
    )
    trainer = TeacherTrainer(
        mel,
        network,
        config.diffusion,
        train,
        content,
        speaker_table,
        normalizer,
        device,
        speaker_embedder=speaker_embedder,
    )
    steps = total_steps(train, stream)
    snapshot = config.snapshot()
    trainer.fit(stream, steps, metrics, run_dir, snapshot, progress)
    if run_dir is not None:
        path = trainer.save(run_dir, snapshot)
        logger.info(f"Teacher checkpoint written to {path}")
    return trainer


# ---------------------------------------------------------------------------
# One-step student
# ---------------------------------------------------------------------------

# Fields the student inherits from the teacher it is copied from.
TEACHER_FIELDS = (
    "denoiser_layers",
    "hidden_channels",
    "downsample_stages",
    "kernel_size",
    "time_embedding_dim",
    "speaker_dim",
    "content_dim",
    "teacher_content_layers",
    "teacher_content_hidden",
)


def _student_network(
    teacher: NetworkConfig, requested: NetworkConfig | None
) -> NetworkConfig:
    if requested is None:
        return teacher
    return dataclasses.replace(
        requested, **{name: getattr(teacher, name) for name in TEACHER_FIELDS}
    )



class Distiller(_Trainer):
    """Adversarial distillation of the teacher into a one-step converter.

    The student denoiser starts as an exact copy of the teacher's. The content
    encoder is the trainable lightweight encoder in the ``adcd`` and ``direct``
    modes (and in ``fastvoicegrad`` with ``trainable_content``), otherwise the
    frozen teacher encoder. Each step updates the generator first, then the
    discriminator, on disjoint Adam optimizers.
    """

    kind = "student"

    def __init__(
        self,
        teacher: TeacherModel,
        train: TrainConfig,
        network: NetworkConfig | None = None,
        content_encoder: nn.Module | None = None,
        vocoder: VocoderProtocol | None = None,
        device: str | torch.device = "cpu",
    ):
        super().__init__(train, device)
        if train.mode not in MODE_TERMS:
            raise ConfigurationError(f"'{train.mode}' is not a distillation mode")
        if not 1 <= train.t_prime <= teacher.schedule.T:
            raise ConfigurationError(
                f"t_prime={train.t_prime} outside 1..{teacher.schedule.T}"
            )
        seed_everything(train.seed)
        self.mode = train.mode
        self.teacher = teacher.freeze()
        self.teacher.denoiser.to(self.device)
        self.teacher.content_encoder.to(self.device)
        self.network = _student_network(teacher.network_config, network)
        n_mels = teacher.mel_config.n_mels

        self.student = copy.deepcopy(teacher.denoiser).to(self.device)
        self.student.train().requires_grad_(True)

        self.content_trainable = (
            self.mode in ("adcd", "direct") or train.trainable_content
        )
        if self.content_trainable:
            encoder = content_encoder or build_content_encoder(n_mels, self.network)
            if encoder.head.out_channels != teacher.content_encoder.head.out_channels:
                raise ConfigurationError(
                    f"Student content dim {encoder.head.out_channels} differs from the "
                    f"teacher's {teacher.content_encoder.head.out_channels}"
                )
            self.content_encoder = encoder.to(self.device).train().requires_grad_(True)
        else:
            self.content_encoder = self.teacher.content_encoder

        self.discriminator = build_discriminator(n_mels, self.network).to(self.device)
        if self.discriminator.domain == "waveform" and vocoder is None:
            vocoder = get_default_vocoder(teacher.mel_config)
        self.vocoder = vocoder

        generator_params = list(self.student.parameters())
        if self.content_trainable:
            generator_params += list(self.content_encoder.parameters())
        self.generator_optimizer = _adam(generator_params, train)
        self.discriminator_optimizer = _adam(self.discriminator.parameters(), train)

    @property
    def schedule(self):
        return self.teacher.schedule

    @property
    def content_kind(self) -> str:
        if isinstance(self.content_encoder, TeacherContentEncoder):
            return "teacher"
        return "trainable"

    def one_step(
        self, x: torch.Tensor, s: torch.Tensor, noise: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Diffuse ``x`` to t' and take one student reverse step.

        Returns the converted mel and the student content embedding of ``x``.
        """
        return one_step_convert(
            x,
            s,
            noise,
            self.student,
            self.content_encoder,
            self.schedule,
            self.config.t_prime,
        )

    def _draw(self, x: torch.Tensor, generator: torch.Generator):
        t = sample_steps(x.shape[0], self.schedule.T, generator).to(self.device)
        return t, _normal_like(x, generator)

    def _prepare(self, batch, step: int):
        generator = step_generator(self.config.seed, step)
        x0 = batch.mel.to(self.device)
        s_src = speaker_vectors(self.teacher.speaker_table, batch.speaker_ids, self.device)
        with torch.no_grad():
            p_src = self.teacher.content_encoder(x0)
        return generator, x0, s_src, p_src

    def _finish(self, report: LossReport, real: torch.Tensor, fake: torch.Tensor):
        _backward(self.generator_optimizer, report.total, "generator")
        loss = adv_loss_discriminator(real, fake.detach(), self.discriminator, self.vocoder)
        _backward(self.discriminator_optimizer, loss, "discriminator")
        report.discriminator = float(loss)
        return report

    def adcd_step(self, batch, step: int) -> LossReport:
        """Conversion, reconversion and inverse score distillation in one update."""
        generator, x0, s_src, p_src = self._prepare(batch, step)
        teacher = self.teacher.denoiser
        conditioning = build_batch_conditioning(
            batch.speaker_ids,
            s_src,
            step_rng(self.config.seed, step),
            strict=self.config.strict_conditioning,
        )
        x_cv, _ = self.one_step(x0, conditioning.s_tgt, _normal_like(x0, generator))

        components = {
            "adv_cv": adv_loss_generator(x_cv, self.discriminator, self.vocoder),
            "fm": feature_matching_loss(x_cv, x0, self.discriminator, self.vocoder),
        }
        t, noise = self._draw(x0, generator)
        components["dist_cv"] = score_distillation_loss(
            x_cv, conditioning.s_tgt, p_src, teacher, self.schedule, t, noise
        )
        inverse = self.config.use_inverse and not conditioning.degraded
        if inverse:
            components["inv_cv"] = inverse_score_distillation_loss(
                x_cv,
                conditioning.s_inv,
                p_src,
                teacher,
                self.schedule,
                t,
                noise,
                s_tgt=conditioning.s_tgt,
            )

        if self.config.use_reconversion:
            x_cv2, _ = self.one_step(
                x_cv, conditioning.s_tgt2, _normal_like(x0, generator)
            )
            t2, noise2 = self._draw(x0, generator)
            components["dist_cv2"] = score_distillation_loss(
                x_cv2, conditioning.s_tgt2, p_src, teacher, self.schedule, t2, noise2
            )
            if inverse:
                components["inv_cv2"] = inverse_score_distillation_loss(
                    x_cv2,
                    conditioning.s_inv2,
                    p_src,
                    teacher,
                    self.schedule,
                    t2,
                    noise2,
                    s_tgt=conditioning.s_tgt2,
                )

        report = total_generator_loss(components, self.config.weights, "adcd")
        return self._finish(report, x0, x_cv)

    def _reconstruction_components(self, batch, step: int):
        generator, x0, s_src, p_src = self._prepare(batch, step)
        x_rec, p_student = self.one_step(x0, s_src, _normal_like(x0, generator))
        t, noise = self._draw(x0, generator)
        components = {
            "adv_rec": adv_loss_generator(x_rec, self.discriminator, self.vocoder),
            "fm": feature_matching_loss(x_rec, x0, self.discriminator, self.vocoder),
            "dist_rec": score_distillation_loss(
                x_rec, s_src, p_src, self.teacher.denoiser, self.schedule, t, noise
            ),
        }
        return components, x0, x_rec, p_student, p_src

    def fastvoicegrad_step(self, batch, step: int) -> LossReport:
        """Reconstruction-process distillation with source speaker conditioning."""
        components, x0, x_rec, _, _ = self._reconstruction_components(batch, step)
        report = total_generator_loss(components, self.config.weights, "fastvoicegrad")
        return self._finish(report, x0, x_rec)

    def direct_distillation_step(self, batch, step: int) -> LossReport:
        """Reconstruction distillation plus L1 alignment to the teacher encoder."""
        components, x0, x_rec, p_student, p_src = self._reconstruction_components(
            batch, step
        )
        components["align"] = content_alignment_loss(p_student, p_src)
        report = total_generator_loss(
            components, self.config.weights, "direct", self.config.align_weight
        )
        return self._finish(report, x0, x_rec)

    def step(self, batch, step: int) -> LossReport:
        if self.mode == "adcd":
            return self.adcd_step(batch, step)
        if self.mode == "direct":
            return self.direct_distillation_step(batch, step)
        return self.fastvoicegrad_step(batch, step)

    @property
    def model(self) -> StudentModel:
        return StudentModel(
            denoiser=self.student,
            content_encoder=self.content_encoder,
            schedule=self.schedule,
            t_prime=self.config.t_prime,
            mel_config=self.teacher.mel_config,
            network_config=self.network,
            speaker_table=self.teacher.speaker_table,
            normalizer=self.teacher.normalizer,
            speaker_embedder=self.teacher.speaker_embedder,
            content_kind=self.content_kind,
            mode=self.mode,
        )

    def to_checkpoint(self, config: dict[str, Any]) -> Checkpoint:
        return self.model.to_checkpoint(
            config,
            step=self.step_count,
            optimizers={
                "generator": self.generator_optimizer.state_dict(),
                "discriminator": self.discriminator_optimizer.state_dict(),
            },
            discriminator=self.discriminator,
        )

    def load_state(self, checkpoint: Checkpoint) -> "Distiller":
        """Restore a student checkpoint written by this trainer."""
        if checkpoint.kind != "student":
            raise CheckpointError(f"Cannot resume a student from '{checkpoint.kind}'")
        if checkpoint.t_prime != self.config.t_prime:
            raise CheckpointError(
                f"Checkpoint was trained at t'={checkpoint.t_prime}, "
                f"config asks for {self.config.t_prime}"
            )
        load_params(self.student, checkpoint, "denoiser")
        load_params(self.content_encoder, checkpoint, "content_encoder")
        load_params(self.discriminator, checkpoint, "discriminator")
        optimizers = checkpoint.optimizers
        if "generator" in optimizers:
            self.generator_optimizer.load_state_dict(optimizers["generator"])
        if "discriminator" in optimizers:
            self.discriminator_optimizer.load_state_dict(optimizers["discriminator"])
        restore_rng_state(checkpoint.rng)
        self.step_count = checkpoint.step
        return self


def train_student(
    teacher: TeacherModel,
    records: list[UtteranceRecord],
    config: OneStepVCConfig,
    run_dir: RunDirectory | None = None,
    metrics: MetricsLogger | None = None,
    resume: Checkpoint | None = None,
    device: str | torch.device = "cpu",
    progress: bool = True,
) -> Distiller:
    """Build a Distiller for ``config.train.mode`` and run it to completion."""
    config.validate()
    train = config.train
    network = config.network
    if network.content_layers != teacher.network_config.content_layers:
        logger.info(f"Student content encoder uses {network.content_layers} layers")
    stream = BatchStream(
        records, train.batch_size, train.segment_frames, train.seed, teacher.normalizer
    )
    distiller = Distiller(teacher, train, network=network, device=device)
    if resume is not None:
        distiller.load_state(resume)
        logger.info(f"Resuming {train.mode} distillation at step {distiller.step_count}")
    snapshot = config.snapshot()
    distiller.fit(stream, total_steps(train, stream), metrics, run_dir, snapshot, progress)
    if run_dir is not None:
        path = distiller.save(run_dir, snapshot)
        logger.info(f"Student checkpoint written to {path}")
    return distiller


__all__ = [
    "BatchConditioning",
    "Distiller",
    "TeacherTrainer",
    "build_batch_conditioning",
    "pretrain_content_encoder",
    "seed_everything",
    "speaker_table_from_embedder",
    "step_generator",
    "train_speaker_embedder",
    "train_student",
    "train_teacher",
]
