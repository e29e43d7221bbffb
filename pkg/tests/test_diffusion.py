import numpy as np
import pytest
import torch

from onestepvc.diffusion import (
    forward_diffuse,
    make_schedule,
    reverse_step,
    sample_steps,
)
from onestepvc.exceptions import ScheduleError, ShapeError


def test_full_scale_schedule_values():
    schedule = make_schedule(1000, 1e-4, 0.02)
    assert schedule.beta[0] == pytest.approx(1e-4)
    assert schedule.beta[-1] == pytest.approx(0.02)
    assert schedule.alpha_bar.dtype == np.float64
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert np.all((schedule.alpha_bar > 0) & (schedule.alpha_bar < 1))
    assert schedule.alpha_bar[949] == pytest.approx(np.prod(1 - schedule.beta[:950]))
    assert schedule.alpha_bar[949] < 1e-3


def test_schedule_rejects_bad_parameters():
    with pytest.raises(ScheduleError):
        make_schedule(0, 1e-4, 0.02)
    with pytest.raises(ScheduleError):
        make_schedule(10, 0.02, 1e-4)
    with pytest.raises(ScheduleError):
        make_schedule(10, 1e-4, 1.0)
    with pytest.raises(ScheduleError):
        make_schedule(10, 1e-4, 0.02, kind="cosine")


def test_forward_diffuse_matches_closed_form(schedule):
    x0 = torch.randn(2, 16, 8, dtype=torch.float64)
    eps = torch.randn(2, 16, 8, dtype=torch.float64)
    ab = schedule.alpha_bar[9]
    x_t = forward_diffuse(x0, 10, eps, schedule).x_t
    assert torch.allclose(x_t, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)


def test_forward_then_reverse_with_true_noise_at_step_one(schedule):
    x0 = torch.randn(3, 16, 8, dtype=torch.float64)
    eps = torch.randn_like(x0)
    x1 = forward_diffuse(x0, 1, eps, schedule).x_t
    assert torch.allclose(reverse_step(x1, 1, eps, schedule), x0, atol=1e-10)


def test_per_element_steps(schedule):
    x0 = torch.zeros(2, 4, 3, dtype=torch.float64)
    eps = torch.ones_like(x0)
    t = torch.tensor([1, 50])
    x_t = forward_diffuse(x0, t, eps, schedule).x_t
    assert torch.allclose(x_t[0], torch.full((4, 3), np.sqrt(1 - schedule.alpha_bar[0]), dtype=torch.float64))
    assert torch.allclose(x_t[1], torch.full((4, 3), np.sqrt(1 - schedule.alpha_bar[49]), dtype=torch.float64))


@pytest.mark.parametrize("t", [0, 51, -1])
def test_step_out_of_range(schedule, t):
    x = torch.zeros(1, 4, 4)
    with pytest.raises(ScheduleError):
        forward_diffuse(x, t, x, schedule)
    with pytest.raises(ScheduleError):
        reverse_step(x, t, x, schedule)


def test_shape_mismatch(schedule):
    with pytest.raises(ShapeError):
        forward_diffuse(torch.zeros(1, 4, 4), 3, torch.zeros(1, 4, 5), schedule)
    with pytest.raises(ShapeError):
        reverse_step(torch.zeros(1, 4, 4), 3, torch.zeros(1, 4, 5), schedule)


def test_sample_steps_range():
    generator = torch.Generator().manual_seed(0)
    t = sample_steps(1000, 50, generator)
    assert int(t.min()) >= 1 and int(t.max()) <= 50


def test_kernels_gradcheck(schedule):
    def roundtrip(x0, eps, eps_pred):
        x_t = forward_diffuse(x0, 7, eps, schedule).x_t
        return reverse_step(x_t, 7, eps_pred, schedule)

    inputs = tuple(
        torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True) for _ in range(3)
    )
    assert torch.autograd.gradcheck(roundtrip, inputs)


def _scalar_alpha_bar(t, T=50, start=1e-4, end=0.02):
    value = 1.0
    for k in range(t):
        value *= 1.0 - (start + (end - start) * k / (T - 1))
    return value


def test_kernels_match_scalar_loop(schedule):
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = int(rng.integers(1, 51))
        x0, eps, eps_hat = rng.standard_normal((3, 2, 3, 4))
        ab = _scalar_alpha_bar(t)
        alpha = ab / _scalar_alpha_bar(t - 1)
        x_t = forward_diffuse(
            torch.from_numpy(x0), t, torch.from_numpy(eps), schedule
        ).x_t.numpy()
        back = reverse_step(
            torch.from_numpy(x_t), t, torch.from_numpy(eps_hat), schedule
        ).numpy()
        for idx in np.ndindex(x0.shape):
            expected = np.sqrt(ab) * x0[idx] + np.sqrt(1 - ab) * eps[idx]
            assert abs(x_t[idx] - expected) < 1e-6
            mean = (x_t[idx] - (1 - alpha) / np.sqrt(1 - ab) * eps_hat[idx]) / np.sqrt(alpha)
            assert abs(back[idx] - mean) < 1e-6
