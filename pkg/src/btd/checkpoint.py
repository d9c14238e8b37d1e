"""Checkpoint container.

A checkpoint is a ``torch.save`` dictionary::

    format            "btd-checkpoint"
    format_version    1
    schedule          {"T", "beta_start", "beta_end"}
    model_config      ModelConfig fields
    state_dict        network weights
    optimizer         optimizer state (for resuming), may be None
    rng_state         training generator state (for resuming), may be None
    metadata          {"seed", "training_steps", "modality", "learning_rate", ...}

The checkpoint id is a digest of the weights alone, so it identifies the
network independently of file layout.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import torch

from btd.diffusion import NoiseSchedule
from btd.errors import ConfigError, DataError
from btd.model import ModelConfig, NoisePredictor, build_model

FORMAT = "btd-checkpoint"
FORMAT_VERSION = 1


def weights_digest(model: NoisePredictor) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@dataclass
class Checkpoint:
    model: NoisePredictor
    schedule: NoiseSchedule
    metadata: dict = field(default_factory=dict)
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None

    @property
    def checkpoint_id(self) -> str:
        return weights_digest(self.model)

    @property
    def modality(self) -> str | None:
        return self.metadata.get("modality")


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` to ``path`` and return its id."""
    meta = dict(ckpt.metadata)
    meta["training_steps"] = ckpt.model.training_steps
    payload = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "schedule": ckpt.schedule.to_dict(),
        "model_config": ckpt.model.config.to_dict(),
        "state_dict": ckpt.model.state_dict(),
        "optimizer": ckpt.optimizer_state,
        "rng_state": ckpt.rng_state,
        "metadata": meta,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())
    return ckpt.checkpoint_id


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise DataError(f"{path} is not a btd checkpoint")
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {payload.get('format_version')!r}")
    model = build_model(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    meta = payload.get("metadata", {})
    model.training_steps = int(meta.get("training_steps", 0))
    return Checkpoint(
        model=model,
        schedule=NoiseSchedule.from_dict(payload["schedule"]),
        metadata=meta,
        optimizer_state=payload.get("optimizer"),
        rng_state=payload.get("rng_state"),
    )
