"""Training loop around :func:`btd.diffusion.training_step`."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from btd.diffusion import NoiseSchedule, generate, training_step
from btd.errors import ConfigError, InputError
from btd.model import NoisePredictor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    log_every: int = 100
    sample_every: int = 0
    n_samples: int = 4

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")


def make_optimizer(model: NoisePredictor, lr: float, state: dict | None = None) -> torch.optim.Optimizer:
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    if state is not None:
        opt.load_state_dict(state)
    return opt


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    losses: list[tuple[int, float]]


def init_state(model: NoisePredictor, cfg: TrainConfig, optimizer_state=None, rng_state=None) -> TrainState:
    gen = torch.Generator().manual_seed(cfg.seed)
    if rng_state is not None:
        gen.set_state(rng_state)
    return TrainState(make_optimizer(model, cfg.learning_rate, optimizer_state), gen, [])


def train(model: NoisePredictor, patches, schedule: NoiseSchedule, cfg: TrainConfig, state: TrainState | None = None,
          on_sample: Callable[[int, torch.Tensor], None] | None = None) -> TrainState:
    """Run updates until ``model.training_steps == cfg.steps``.

    ``patches`` is ``(N, H, W)`` or ``(N, 1, H, W)``. Batches are drawn with
    replacement from the state's generator, which also draws steps and noise,
    so a run is reproducible from ``cfg.seed`` and resumable from a saved
    generator state.
    """
    cfg.validate()
    data = torch.as_tensor(np.asarray(patches, dtype=np.float32))
    if data.ndim == 3:
        data = data[:, None]
    if data.shape[0] == 0:
        raise InputError("training set is empty")
    size = model.config.patch_size
    if data.shape[-2:] != (size, size):
        raise InputError(f"training patches are {tuple(data.shape[-2:])}, model expects {size}x{size}")
    state = state or init_state(model, cfg)
    t0 = time.perf_counter()
    while model.training_steps < cfg.steps:
        idx = torch.randint(0, data.shape[0], (cfg.batch_size,), generator=state.generator)
        step = model.training_steps + 1
        loss = training_step(model, data[idx], schedule, state.optimizer, state.generator, step=step)
        state.losses.append((step, loss))
        if cfg.log_every and step % cfg.log_every == 0:
            recent = [v for _, v in state.losses[-cfg.log_every:]]
            log.info("step %d loss %.5f (%.1fs)", step, float(np.mean(recent)), time.perf_counter() - t0)
        if on_sample is not None and cfg.sample_every and step % cfg.sample_every == 0:
            sample_gen = torch.Generator().manual_seed(cfg.seed + step)
            on_sample(step, generate(model, schedule, (cfg.n_samples, 1, size, size), sample_gen))
    return state


def smoothed_loss(losses: list[tuple[int, float]], at: int, window: int = 50) -> float:
    """Mean loss over the ``window`` steps ending at step ``at``."""
    vals = [v for s, v in losses if at - window < s <= at]
    if not vals:
        raise InputError(f"no losses recorded up to step {at}")
    return float(np.mean(vals))
