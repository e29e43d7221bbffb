"""Noise schedule and the forward/reverse diffusion kernels.

Step indices are 1-based at the API boundary (``t`` in ``1..T``) and converted
to 0-based storage indices only inside this module.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ScheduleError, ShapeError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step variances and cumulative products, stored in float64."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float
    kind: str = "linear"

    def coefficient(
        self, name: str, t: int | torch.Tensor, like: torch.Tensor
    ) -> torch.Tensor:
        """Gather ``name`` at 1-based steps ``t``, shaped to broadcast over ``like``.

        An integer ``t`` applies to the whole batch; a tensor ``t`` holds one
        step per batch element.
        """
        values = torch.as_tensor(
            getattr(self, name), dtype=like.dtype, device=like.device
        )
        index = validate_step(t, self.T)
        if isinstance(index, int):
            return values[index - 1]
        if index.dim() != 1 or index.shape[0] != like.shape[0]:
            raise ShapeError(
                f"Per-element steps must have shape ({like.shape[0]},), "
                f"got {tuple(index.shape)}"
            )
        gathered = values[index.to(like.device) - 1]
        return gathered.view(-1, *([1] * (like.dim() - 1)))

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }


@dataclass(frozen=True)
class DiffusedSample:
    x_t: torch.Tensor
    t: int | torch.Tensor
    epsilon: torch.Tensor


def validate_step(t: int | torch.Tensor, T: int) -> int | torch.Tensor:
    if isinstance(t, torch.Tensor):
        if t.dim() == 0:
            t = int(t.item())
        else:
            if t.numel() and (int(t.min()) < 1 or int(t.max()) > T):
                raise ScheduleError(f"Step indices must lie in 1..{T}")
            return t.long()
    t = int(t)
    if not 1 <= t <= T:
        raise ScheduleError(f"Step index {t} outside 1..{T}")
    return t


def make_schedule(
    T: int, beta_start: float, beta_end: float, kind: str = "linear"
) -> NoiseSchedule:
    """Build a noise schedule with beta interpolated from start to end.

    Args:
        T: Number of diffusion steps.
        beta_start: Noise variance of step 1.
        beta_end: Noise variance of step T.
        kind: Interpolation curve; only ``linear`` is supported.

    Returns:
        An immutable NoiseSchedule.
    """
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"Unsupported schedule kind '{kind}'")
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(
            f"Require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    logger.debug(f"Built {kind} schedule T={T}, alpha_bar[T]={alpha_bar[-1]:.3e}")
    return NoiseSchedule(
        T=int(T),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        kind=kind,
    )


def forward_diffuse(
    x0: torch.Tensor,
    t: int | torch.Tensor,
    epsilon: torch.Tensor,
    schedule: NoiseSchedule,
) -> DiffusedSample:
    """Diffuse clean data to step ``t``: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if epsilon.shape != x0.shape:
        raise ShapeError(
            f"Noise shape {tuple(epsilon.shape)} != data shape {tuple(x0.shape)}"
        )
    alpha_bar = schedule.coefficient("alpha_bar", t, x0)
    x_t = alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * epsilon
    return DiffusedSample(x_t=x_t, t=t, epsilon=epsilon)


def reverse_step(
    x_t: torch.Tensor,
    t: int | torch.Tensor,
    eps_pred: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Reverse diffusion mean for one step, without sampling noise."""
    if eps_pred.shape != x_t.shape:
        raise ShapeError(
            f"Prediction shape {tuple(eps_pred.shape)} != "
            f"input shape {tuple(x_t.shape)}"
        )
    alpha = schedule.coefficient("alpha", t, x_t)
    alpha_bar = schedule.coefficient("alpha_bar", t, x_t)
    return (x_t - (1.0 - alpha) / (1.0 - alpha_bar).sqrt() * eps_pred) / alpha.sqrt()


def sample_steps(
    batch_size: int, T: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Draw one step per batch element uniformly from 1..T."""
    return torch.randint(1, T + 1, (batch_size,), generator=generator)
