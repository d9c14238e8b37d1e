"""Gaussian diffusion: noise schedule, closed-form noising, training loss and reverse step.

Forward process in closed form::

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I)

Reverse (posterior mean) step with sigma_t^2 = beta_t::

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * F(x_t, t)) / sqrt(alpha_t) + sigma_t * z

Step indices are 1-based: t = 1 is the least noisy step and abar_0 = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from btd.errors import ConfigError, GenerationError, InputError, TrainingDivergedError


@dataclass(frozen=True)
class NoiseSchedule:
    """The beta/alpha/alpha-bar ladder. Arrays are float64 and indexed by ``t - 1``."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention after ``t`` steps; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        self.check_step(t)
        return float(self.alpha_bars[t - 1])

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise InputError(f"step index t={t} outside [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start < 1.0:
        raise ConfigError(f"beta_start={beta_start} must lie in (0, 1)")
    if not 0.0 < beta_end < 1.0:
        raise ConfigError(f"beta_end={beta_end} must lie in (0, 1)")
    if beta_start > beta_end:
        raise ConfigError(f"beta_start={beta_start} exceeds beta_end={beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def _per_item(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule ``values`` at 1-based steps ``t`` shaped to broadcast against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        v = torch.tensor(values, dtype=like.dtype)[t.long().cpu() - 1].to(like.device)
        return v.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(values[int(t) - 1]), dtype=like.dtype, device=like.device)


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """Noise ``x0`` to step ``t`` in one shot.

    ``t`` may be an int (``0`` returns ``x0`` unchanged) or a 1-D tensor of
    per-item steps for a batch. Works on numpy arrays and torch tensors.
    """
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise InputError(f"noise shape {tuple(np.shape(eps))} does not match patch shape {tuple(np.shape(x0))}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if int(t.min()) < 1 or int(t.max()) > schedule.T:
            raise InputError(f"step indices must lie in [1, {schedule.T}]")
        ab = _per_item(schedule.alpha_bars, t, x0)
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    t = int(t)
    if t != 0:
        schedule.check_step(t)
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _as_steps(t, n: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return t.to(device=device, dtype=torch.long)
    return torch.full((n,), int(t), dtype=torch.long, device=device)


def diffusion_loss(model, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean over batch and pixels of ``(eps - F(x_t, t))**2``."""
    x_t = forward_noise(x0, t, eps, schedule)
    return torch.mean((eps - model(x_t, t)) ** 2)


def sample_training_noise(batch: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator | None):
    """Draw per-item uniform steps in [1, T] and matching standard-normal noise."""
    t = torch.randint(1, schedule.T + 1, (batch.shape[0],), generator=generator)
    eps = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
    return t.to(batch.device), eps.to(batch.device)


def training_step(model, batch: torch.Tensor, schedule: NoiseSchedule, optimizer, generator=None, step=None) -> float:
    """One gradient update on ``batch``; returns the loss before the update.

    Raises:
        TrainingDivergedError: if the loss is not finite. Weights are left untouched.
    """
    if batch.shape[0] == 0:
        raise InputError("training batch is empty")
    model.train()
    t, eps = sample_training_noise(batch, schedule, generator)
    loss = diffusion_loss(model, batch, t, eps, schedule)
    value = float(loss.detach())
    if not np.isfinite(value):
        where = step if step is not None else getattr(model, "training_steps", "?")
        raise TrainingDivergedError(f"non-finite loss {value} at step {where} with t={t.tolist()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    if hasattr(model, "training_steps"):
        model.training_steps += 1
    return value


def reverse_coefficients(t: int, schedule: NoiseSchedule) -> tuple[float, float, float]:
    """Return ``(1/sqrt(alpha_t), beta_t/sqrt(1-abar_t), sigma_t)`` for step ``t``."""
    schedule.check_step(t)
    alpha = float(schedule.alphas[t - 1])
    beta = float(schedule.betas[t - 1])
    abar = float(schedule.alpha_bars[t - 1])
    return 1.0 / math.sqrt(alpha), beta / math.sqrt(1.0 - abar), math.sqrt(beta)


@torch.no_grad()
def reverse_step(model, x_t: torch.Tensor, t: int, schedule: NoiseSchedule, stochastic: bool = False,
                 generator=None, z: torch.Tensor | None = None) -> torch.Tensor:
    """Estimate ``x_{t-1}`` from ``x_t``.

    In stochastic mode ``sigma_t * z`` is added for ``t > 1``; pass ``z`` to fix
    the draw, otherwise it comes from ``generator``.
    """
    t = int(t)
    inv_sqrt_alpha, eps_coef, sigma = reverse_coefficients(t, schedule)
    steps = _as_steps(t, x_t.shape[0], x_t.device)
    mean = inv_sqrt_alpha * (x_t - eps_coef * model(x_t, steps))
    if stochastic and t > 1:
        if z is None:
            z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype).to(x_t.device)
        mean = mean + sigma * z
    return mean


@torch.no_grad()
def generate(model, schedule: NoiseSchedule, shape, generator=None, stochastic: bool = True) -> torch.Tensor:
    """Sample from the model by running the reverse chain from ``t = T`` to ``t = 1``."""
    model.eval()
    x = torch.randn(tuple(shape), generator=generator)
    for t in range(schedule.T, 0, -1):
        x = reverse_step(model, x, t, schedule, stochastic=stochastic, generator=generator)
        if not torch.isfinite(x).all():
            raise GenerationError(f"non-finite values produced at t={t}")
    return x
