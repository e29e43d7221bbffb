"""Training objectives: DDPM, adversarial, feature matching and score distillation.

L1 reductions are means over every element of the batch. Score distillation
targets come from a single reverse-diffusion mean of the frozen teacher, with
the diffused student sample detached before it reaches the teacher.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import torch
from torch import nn

from .adapters import vocode
from .config import LossWeights
from .diffusion import NoiseSchedule, forward_diffuse, reverse_step
from .exceptions import (
    ConditioningError,
    DivergenceError,
    DomainError,
    ShapeError,
)
from .interfaces import VocoderProtocol
from .networks import frozen

logger = logging.getLogger(__name__)

EpsilonModel = Callable[..., torch.Tensor]

MODE_TERMS = {
    "fastvoicegrad": ("adv_rec", "fm", "dist_rec"),
    "direct": ("adv_rec", "fm", "dist_rec", "align"),
    "adcd": ("adv_cv", "fm", "dist_cv", "dist_cv2", "inv_cv", "inv_cv2"),
}


def term_weight(name: str, weights: LossWeights, align_weight: float = 1.0) -> float:
    if name.startswith("adv"):
        return 1.0
    if name == "fm":
        return weights.lambda_fm
    if name.startswith("dist"):
        return weights.lambda_dist
    if name.startswith("inv"):
        return weights.lambda_inv_dist
    if name == "align":
        return align_weight
    raise KeyError(f"Unknown loss term '{name}'")


@dataclass
class LossReport:
    """Named loss terms of one generator step plus their weighted total."""

    terms: dict[str, torch.Tensor]
    weights: dict[str, float]
    total: torch.Tensor
    discriminator: float | None = None
    extras: dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return sum(self.weights[k] * float(v) for k, v in self.terms.items())

    def as_record(self) -> dict[str, float]:
        record = {name: float(value) for name, value in self.terms.items()}
        record["total"] = float(self.total)
        if self.discriminator is not None:
            record["disc_adv"] = self.discriminator
        record.update(self.extras)
        return record


def _check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise DivergenceError(f"Non-finite values in {name}")
    return value


def _discriminator_input(
    x: torch.Tensor, discriminator: nn.Module, vocoder: VocoderProtocol | None
) -> torch.Tensor:
    if getattr(discriminator, "domain", "mel") == "waveform":
        if vocoder is None:
            raise DomainError("Waveform-domain discriminator needs a vocoder")
        return vocode(x, vocoder)
    return x


def ddpm_loss(
    x0: torch.Tensor,
    t: int | torch.Tensor,
    noise: torch.Tensor,
    denoiser: EpsilonModel,
    s: torch.Tensor,
    p: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Mean L1 between the injected noise and the denoiser's prediction."""
    diffused = forward_diffuse(x0, t, noise, schedule)
    eps_pred = _check_finite("denoiser output", denoiser(diffused.x_t, t, s, p))
    return (noise - eps_pred).abs().mean()


def adv_loss_discriminator(
    real: torch.Tensor,
    generated: torch.Tensor,
    discriminator: nn.Module,
    vocoder: VocoderProtocol | None = None,
) -> torch.Tensor:
    """Least-squares discriminator loss, averaged over sub-discriminators."""
    real_scores, _ = discriminator(_discriminator_input(real, discriminator, vocoder))
    gen_scores, _ = discriminator(
        _discriminator_input(generated.detach(), discriminator, vocoder)
    )
    real_term = torch.stack([((r - 1.0) ** 2).mean() for r in real_scores]).mean()
    gen_term = torch.stack([(g**2).mean() for g in gen_scores]).mean()
    return real_term + gen_term


def adv_loss_generator(
    generated: torch.Tensor,
    discriminator: nn.Module,
    vocoder: VocoderProtocol | None = None,
) -> torch.Tensor:
    """Least-squares generator loss; discriminator parameters stay constant."""
    with frozen(discriminator):
        scores, _ = discriminator(
            _discriminator_input(generated, discriminator, vocoder)
        )
    return torch.stack([((g - 1.0) ** 2).mean() for g in scores]).mean()


def feature_matching_loss(
    generated: torch.Tensor,
    reference: torch.Tensor,
    discriminator: nn.Module,
    vocoder: VocoderProtocol | None = None,
) -> torch.Tensor:
    """Mean L1 between discriminator feature taps of two inputs."""
    if generated.shape != reference.shape:
        raise ShapeError(
            f"Feature matching needs equal shapes, got {tuple(generated.shape)} "
            f"and {tuple(reference.shape)}"
        )
    with frozen(discriminator):
        _, gen_feats = discriminator(
            _discriminator_input(generated, discriminator, vocoder)
        )
        with torch.no_grad():
            _, ref_feats = discriminator(
                _discriminator_input(reference, discriminator, vocoder)
            )
    if len(gen_feats) != len(ref_feats) or not gen_feats:
        raise ShapeError(
            f"Feature tap mismatch: {len(gen_feats)} vs {len(ref_feats)}"
        )
    return torch.stack(
        [(g - r).abs().mean() for g, r in zip(gen_feats, ref_feats)]
    ).mean()


@torch.no_grad()
def distillation_target(
    x_student: torch.Tensor,
    s_cond: torch.Tensor,
    p_cond: torch.Tensor,
    teacher: EpsilonModel,
    schedule: NoiseSchedule,
    t: int | torch.Tensor,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Diffuse the detached student output to ``t`` and take one teacher step."""
    diffused = forward_diffuse(x_student.detach(), t, noise, schedule)
    eps_pred = teacher(diffused.x_t, t, s_cond, p_cond)
    _check_finite("teacher output", eps_pred)
    return reverse_step(diffused.x_t, t, eps_pred, schedule)


def weighted_l1(
    x: torch.Tensor,
    target: torch.Tensor,
    t: int | torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """sqrt(alpha_bar_t)-weighted mean absolute residual."""
    weight = schedule.coefficient("alpha_bar", t, x).sqrt()
    return (weight * (x - target).abs()).mean()


def score_distillation_loss(
    x_student: torch.Tensor,
    s_cond: torch.Tensor,
    p_cond: torch.Tensor,
    teacher: EpsilonModel,
    schedule: NoiseSchedule,
    t: int | torch.Tensor,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Pull the student output towards the teacher's one-step denoised version.

    The same function serves the reconstruction, conversion and reconversion
    forms; they differ only in the conditioning passed in.
    """
    target = distillation_target(
        x_student, s_cond, p_cond, teacher, schedule, t, noise
    )
    return weighted_l1(x_student, target, t, schedule)


def inverse_score_distillation_loss(
    x_student: torch.Tensor,
    s_inv: torch.Tensor,
    p_cond: torch.Tensor,
    teacher: EpsilonModel,
    schedule: NoiseSchedule,
    t: int | torch.Tensor,
    noise: torch.Tensor,
    s_tgt: torch.Tensor | None = None,
) -> torch.Tensor:
    """Push the student output away from the teacher's version under ``s_inv``.

    Raises ConditioningError when ``s_tgt`` is given and any row of ``s_inv``
    equals the corresponding target embedding.
    """
    if s_tgt is not None:
        collisions = torch.isclose(s_inv, s_tgt).all(dim=-1)
        if collisions.any():
            raise ConditioningError(
                f"s_inv equals s_tgt for batch rows {collisions.nonzero().flatten().tolist()}"
            )
    return -score_distillation_loss(
        x_student, s_inv, p_cond, teacher, schedule, t, noise
    )


def content_alignment_loss(
    p_student: torch.Tensor,
    p_teacher: torch.Tensor,
    projection: nn.Module | None = None,
) -> torch.Tensor:
    """Mean L1 between student and teacher content embeddings on shared frames."""
    if projection is not None:
        p_student = projection(p_student)
    frames = min(p_student.shape[1], p_teacher.shape[1])
    if p_student.shape[-1] != p_teacher.shape[-1]:
        raise ShapeError(
            f"Content dims differ ({p_student.shape[-1]} vs {p_teacher.shape[-1]}) "
            "and no projection was given"
        )
    return (p_student[:, :frames] - p_teacher[:, :frames].detach()).abs().mean()


def total_generator_loss(
    components: dict[str, torch.Tensor | float],
    weights: LossWeights,
    mode: str,
    align_weight: float = 1.0,
) -> LossReport:
    """Weighted generator objective for one training mode.

    Terms absent from ``components`` (e.g. reconversion terms in an ablation)
    contribute nothing.
    """
    if mode not in MODE_TERMS:
        raise ValueError(f"No generator objective for mode '{mode}'")
    allowed = MODE_TERMS[mode]
    unknown = set(components) - set(allowed)
    if unknown:
        raise ValueError(f"Terms {sorted(unknown)} do not belong to mode '{mode}'")

    terms: dict[str, torch.Tensor] = {}
    term_weights: dict[str, float] = {}
    total = None
    for name in allowed:
        if name not in components:
            continue
        value = torch.as_tensor(components[name])
        _check_finite(f"loss term '{name}'", value)
        w = term_weight(name, weights, align_weight)
        terms[name] = value
        term_weights[name] = w
        total = w * value if total is None else total + w * value
    if total is None:
        total = torch.zeros(())
    return LossReport(terms=terms, weights=term_weights, total=total)

