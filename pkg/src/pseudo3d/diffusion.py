"""DDPM forward process, epsilon-prediction loss and ancestral sampling.

Random numbers come from ``torch.Generator`` objects seeded explicitly. A
sampling trajectory is fully determined by its integer seed; independent
trajectories derive their seeds from ``(seed, index)`` through
``numpy.random.SeedSequence`` (see ``trajectory_seed``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, InvalidShapeError, NumericalError, TrainingDivergenceError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor

    def __post_init__(self):
        b = self.betas
        if b.dim() != 1 or b.numel() == 0 or bool((b <= 0).any()) or bool((b >= 1).any()):
            raise InvalidArgumentError("betas must be a nonempty 1-D sequence in (0, 1)")
        object.__setattr__(self, "betas", b.to(torch.float64))

    @classmethod
    def linear(cls, steps: int = 1000, start: float = 1e-4, end: float = 2e-2) -> "NoiseSchedule":
        return cls(torch.linspace(start, end, steps, dtype=torch.float64))

    @property
    def T(self) -> int:
        return self.betas.numel()

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, dim=0)

    def timesteps(self, steps: int | None = None) -> list[int]:
        """Descending timesteps for a sampler with ``steps`` evenly strided steps."""
        if steps is None or steps >= self.T:
            return list(range(self.T - 1, -1, -1))
        if steps < 1:
            raise InvalidArgumentError("sampler needs at least one step")
        ts = np.unique(np.round(np.linspace(0, self.T - 1, steps)).astype(int))
        return [int(t) for t in ts[::-1]]

    def check_t(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool(((t < 0) | (t >= self.T)).any()):
            raise InvalidArgumentError(f"timestep out of range [0, {self.T}): {t.tolist()}")
        return t


def trajectory_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _coef(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    c = values[t].to(like.dtype)
    if c.dim() == 0:
        return c
    return c.view(-1, *([1] * (like.dim() - 1)))


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bar
    return _coef(ab.sqrt(), t, x0) * x0 + _coef((1 - ab).sqrt(), t, x0) * noise


def training_loss(
    model: Callable,
    x0: torch.Tensor,
    schedule: NoiseSchedule,
    *,
    cond: torch.Tensor | None = None,
    fps=None,
    extra: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    cond_drop: float = 0.0,
    step: int | None = None,
    stage: str = "",
) -> torch.Tensor:
    """Epsilon-prediction MSE averaged over all elements."""
    b = x0.shape[0]
    if t is None:
        t = torch.randint(0, schedule.T, (b,), generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    if cond is not None and cond_drop > 0:
        keep = (torch.rand(b, generator=generator) >= cond_drop).to(cond.dtype)
        cond = cond * keep[:, None]
    x_t = q_sample(schedule, x0, t, noise)
    pred = model(x_t, t, fps=fps, cond=cond, extra=extra)
    loss = F.mse_loss(pred, noise)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(step if step is not None else -1, float(loss), stage)
    return loss


def _eps(model, x, t, fps, cond, extra, guidance_scale):
    eps = model(x, t, fps=fps, cond=cond, extra=extra)
    if guidance_scale is not None and cond is not None:
        uncond = model(x, t, fps=fps, cond=torch.zeros_like(cond), extra=extra)
        eps = uncond + guidance_scale * (eps - uncond)
    return eps


def _draw(shape, generator, dtype, shared_frame_noise):
    if shared_frame_noise:
        b, c, f, h, w = shape
        return torch.randn((b, c, 1, h, w), generator=generator, dtype=dtype).expand(shape).contiguous()
    return torch.randn(shape, generator=generator, dtype=dtype)


@torch.no_grad()
def ddpm_sample(
    model: Callable,
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    *,
    cond: torch.Tensor | None = None,
    fps=None,
    extra: torch.Tensor | None = None,
    seed: int = 0,
    shared_frame_noise: bool = False,
    steps: int | None = None,
    known: torch.Tensor | None = None,
    known_mask: torch.Tensor | None = None,
    guidance_scale: float | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from pure noise down to t = 0.

    ``steps`` selects an evenly strided subset of the training timesteps; the
    reverse step between consecutive kept timesteps uses the exact posterior of
    the respaced chain. With ``shared_frame_noise`` the initial noise and every
    injected noise are one draw broadcast over the frame axis. ``known`` and
    ``known_mask`` re-impose given frames after every step (noised to the
    current level; clean after the last step).
    """
    shape = tuple(shape)
    if shared_frame_noise and len(shape) != 5:
        raise InvalidShapeError("shared frame noise needs a (B,C,F,H,W) shape")
    if (known is None) != (known_mask is None):
        raise InvalidArgumentError("known and known_mask go together")
    gen = torch.Generator().manual_seed(int(seed))
    ab = schedule.alpha_bar
    ts = schedule.timesteps(steps)
    x = _draw(shape, gen, dtype, shared_frame_noise)
    if known is not None:
        known = known.to(dtype)
        known_mask = known_mask.to(dtype)
        x = known_mask * q_sample(schedule, known, ts[0], x) + (1 - known_mask) * x
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        ab_t = float(ab[t])
        ab_prev = float(ab[t_prev]) if t_prev >= 0 else 1.0
        beta = 1.0 - ab_t / ab_prev
        t_batch = torch.full((shape[0],), t, dtype=torch.long)
        eps = _eps(model, x, t_batch, fps, cond, extra, guidance_scale)
        x0 = (x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
        if not torch.isfinite(x0).all():
            raise NumericalError(f"non-finite prediction at timestep {t}")
        x0 = x0.clamp(-1, 1)
        c0 = math.sqrt(ab_prev) * beta / (1 - ab_t)
        ct = math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab_t)
        x = c0 * x0 + ct * x
        if t_prev >= 0:
            var = beta * (1 - ab_prev) / (1 - ab_t)
            x = x + math.sqrt(var) * _draw(shape, gen, dtype, shared_frame_noise)
            if known is not None:
                noised = q_sample(schedule, known, t_prev, _draw(shape, gen, dtype, False))
                x = known_mask * noised + (1 - known_mask) * x
    if known is not None:
        x = known_mask * known + (1 - known_mask) * x
    return x.clamp(-1, 1)
