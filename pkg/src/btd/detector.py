"""Anomaly scoring from diffusion residuals.

Three modes share one reduction (mean of squared residual over an ROI or the
whole patch):

* BTD: the residual is ``F(x0, t=1)`` evaluated on the un-noised patch.
* BackwardOnly(d): ``x0 - x_{-d}`` after ``d`` deterministic reverse steps
  starting from ``x0`` treated as ``x_d``.
* ForwardBackward(k): noise ``x0`` to ``x_k``, reverse ``k`` steps, residual
  against ``x0``.

BackwardOnly(1) residual is exactly ``(1 - 1/sqrt(alpha_1)) * x0 +
beta_1 / (sqrt(alpha_1) * sqrt(1 - abar_1)) * F(x0, 1)``; see
:func:`backward_one_residual`.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from btd.diffusion import NoiseSchedule, forward_noise, reverse_coefficients, reverse_step
from btd.errors import ConfigError, InputError

log = logging.getLogger(__name__)

DETECTION_STEP = 1


@dataclass(frozen=True)
class BTD:
    def __str__(self) -> str:
        return "btd"


@dataclass(frozen=True)
class BackwardOnly:
    steps: int = 1
    stochastic: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"backward step count must be >= 1, got {self.steps}")

    def __str__(self) -> str:
        return f"backward:{self.steps}" + (":stochastic" if self.stochastic else "")


@dataclass(frozen=True)
class ForwardBackward:
    steps: int = 1
    stochastic: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"forward/backward step count must be >= 1, got {self.steps}")

    def __str__(self) -> str:
        return f"fb:{self.steps}" + ("" if self.stochastic else ":deterministic")


def parse_mode(text: str):
    """Inverse of ``str(mode)``: ``btd``, ``backward:50``, ``fb:20``, ``fb:20:deterministic``."""
    parts = text.strip().lower().split(":")
    try:
        if parts[0] == "btd" and len(parts) == 1:
            return BTD()
        if parts[0] in ("backward", "b"):
            return BackwardOnly(int(parts[1]), stochastic=parts[2:] == ["stochastic"])
        if parts[0] in ("fb", "forward_backward"):
            return ForwardBackward(int(parts[1]), stochastic=parts[2:] != ["deterministic"])
    except (IndexError, ValueError):
        pass
    raise ConfigError(f"cannot parse detector mode {text!r}")


@dataclass(frozen=True)
class ROI:
    center: tuple[int, int]
    side: int = 32

    def to_dict(self) -> dict:
        return {"center": list(self.center), "side": self.side}


@dataclass
class DetectorConfig:
    mode: BTD | BackwardOnly | ForwardBackward = field(default_factory=BTD)
    use_roi: bool = False
    roi_side: int = 32
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = parse_mode(self.mode)
        if self.roi_side < 1:
            raise ConfigError("roi_side must be >= 1")


@dataclass(frozen=True)
class AnomalyScore:
    value: float
    mode: str
    sample_id: str | None = None
    label: str | None = None
    roi: ROI | None = None
    scanner_id: str | None = None

    def to_record(self, checkpoint_id: str | None = None) -> dict:
        return {
            "sample_id": self.sample_id,
            "label": self.label,
            "scanner_id": self.scanner_id,
            "mode": self.mode,
            "score": self.value,
            "roi": self.roi.to_dict() if self.roi else None,
            "checkpoint_id": checkpoint_id,
        }


def roi_window(shape, center, side: int = 32) -> tuple[slice, slice, bool]:
    """Window of ``side`` pixels centered on ``center``, shifted inward at the borders.

    Returns row and column slices and whether the window had to be moved or shrunk.
    """
    h, w = shape[-2:]
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < h and 0 <= c < w):
        raise InputError(f"ROI center {tuple(center)} outside patch {h}x{w}")
    clamped = False
    sh, sw = min(side, h), min(side, w)
    if (sh, sw) != (side, side):
        clamped = True
    r0, c0 = r - side // 2, c - side // 2
    r1, c1 = min(max(r0, 0), h - sh), min(max(c0, 0), w - sw)
    clamped = clamped or (r1, c1) != (r0, c0)
    return slice(r1, r1 + sh), slice(c1, c1 + sw), clamped


def roi_mean_square(residual, center, side: int = 32) -> float:
    """Mean of squared residual over the ROI window (clamped to the patch)."""
    residual = np.asarray(residual, dtype=np.float64)
    rs, cs, _ = roi_window(residual.shape, center, side)
    return float(np.mean(residual[..., rs, cs] ** 2))


def _reduce(residuals: torch.Tensor, rois: Sequence[ROI | None]) -> list[float]:
    sq = residuals.double() ** 2
    out = []
    for i, roi in enumerate(rois):
        if roi is None:
            out.append(float(sq[i].mean()))
        else:
            rs, cs, _ = roi_window(sq.shape, roi.center, roi.side)
            out.append(float(sq[i, ..., rs, cs].mean()))
    return out


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x, dtype=np.float32)) if not isinstance(x, torch.Tensor) else x.float()
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    return x


def _steps(t: int, n: int) -> torch.Tensor:
    return torch.full((n,), t, dtype=torch.long)


def btd_residuals(model, x0: torch.Tensor) -> torch.Tensor:
    """``F(x0, 1)`` for a batch ``(N, C, H, W)``; no noise is added."""
    with torch.inference_mode():
        return model(x0, _steps(DETECTION_STEP, x0.shape[0]))


def backward_one_residual(x0: torch.Tensor, btd_residual: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """BackwardOnly(1) residual expressed through the BTD residual ``F(x0, 1)``."""
    inv_sqrt_alpha, eps_coef, _ = reverse_coefficients(1, schedule)
    return (1.0 - inv_sqrt_alpha) * x0.double() + inv_sqrt_alpha * eps_coef * btd_residual.double()


def backward_only_residuals(model, x0: torch.Tensor, steps: int, schedule: NoiseSchedule,
                            stochastic: bool = False, generators: Sequence[torch.Generator] | None = None) -> torch.Tensor:
    schedule.check_step(steps)
    x = x0
    with torch.inference_mode():
        for t in range(steps, 0, -1):
            z = _item_noise(x.shape, generators) if stochastic and t > 1 else None
            x = reverse_step(model, x, t, schedule, stochastic=stochastic, z=z)
    return x0 - x


def forward_backward_residuals(model, x0: torch.Tensor, steps: int, schedule: NoiseSchedule,
                               generators: Sequence[torch.Generator], stochastic: bool = True) -> torch.Tensor:
    schedule.check_step(steps)
    with torch.inference_mode():
        x = forward_noise(x0, steps, _item_noise(x0.shape, generators), schedule)
        for t in range(steps, 0, -1):
            z = _item_noise(x.shape, generators) if stochastic and t > 1 else None
            x = reverse_step(model, x, t, schedule, stochastic=stochastic, z=z)
    return x0 - x


def _item_noise(shape, generators) -> torch.Tensor:
    if generators is None:
        return torch.randn(shape)
    return torch.stack([torch.randn(shape[1:], generator=g) for g in generators])


def item_generators(seed: int, sample_ids: Sequence[str]) -> list[torch.Generator]:
    """One generator per sample, keyed on ``(seed, sample_id)`` so results do not depend on batching."""
    gens = []
    for sid in sample_ids:
        digest = hashlib.sha256(f"{seed}:{sid}".encode()).digest()
        gens.append(torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & (2**63 - 1)))
    return gens


def mode_residuals(model, x0: torch.Tensor, mode, schedule: NoiseSchedule, sample_ids: Sequence[str],
                   seed: int = 0) -> torch.Tensor:
    if isinstance(mode, BTD):
        return btd_residuals(model, x0)
    if isinstance(mode, BackwardOnly):
        gens = item_generators(seed, sample_ids) if mode.stochastic else None
        return backward_only_residuals(model, x0, mode.steps, schedule, mode.stochastic, gens)
    if isinstance(mode, ForwardBackward):
        return forward_backward_residuals(model, x0, mode.steps, schedule, item_generators(seed, sample_ids),
                                          mode.stochastic)
    raise ConfigError(f"unknown detector mode {mode!r}")


def _check_roi(roi: ROI | None, shape) -> None:
    if roi is not None:
        roi_window(shape, roi.center, roi.side)


def _single(model, x0, mode, schedule, roi, seed, sample_id) -> AnomalyScore:
    x = _as_batch(x0)
    _check_roi(roi, x.shape)
    model.eval()
    sid = sample_id if sample_id is not None else "sample"
    res = mode_residuals(model, x, mode, schedule, [sid], seed)
    return AnomalyScore(_reduce(res, [roi])[0], str(mode), sample_id, roi=roi)


def btd_score(model, x0, roi: ROI | None = None, sample_id: str | None = None) -> AnomalyScore:
    """Mean squared ``F(x0, 1)`` over ``roi`` (or the whole patch). Deterministic."""
    x = _as_batch(x0)
    _check_roi(roi, x.shape)
    model.eval()
    return AnomalyScore(_reduce(btd_residuals(model, x), [roi])[0], "btd", sample_id, roi=roi)


def backward_only_score(model, x0, steps: int, schedule: NoiseSchedule, roi: ROI | None = None,
                        stochastic: bool = False, seed: int = 0, sample_id: str | None = None) -> AnomalyScore:
    schedule.check_step(steps)
    return _single(model, x0, BackwardOnly(steps, stochastic), schedule, roi, seed, sample_id)


def forward_backward_score(model, x0, steps: int, schedule: NoiseSchedule, roi: ROI | None = None,
                           seed: int = 0, stochastic: bool = True, sample_id: str | None = None) -> AnomalyScore:
    schedule.check_step(steps)
    return _single(model, x0, ForwardBackward(steps, stochastic), schedule, roi, seed, sample_id)


def score_patches(model, patches, config: DetectorConfig, schedule: NoiseSchedule,
                  sample_ids: Sequence[str] | None = None, centers: Sequence | None = None,
                  labels: Sequence[str | None] | None = None,
                  scanner_ids: Sequence[str | None] | None = None) -> list[AnomalyScore]:
    """Score an in-memory stack of patches ``(N, H, W)`` in batches of ``config.batch_size``."""
    x_all = _as_batch(patches) if len(patches) else torch.empty(0)
    n = x_all.shape[0] if len(patches) else 0
    sample_ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(n)]
    labels = list(labels) if labels is not None else [None] * n
    scanner_ids = list(scanner_ids) if scanner_ids is not None else [None] * n
    rois: list[ROI | None] = [None] * n
    if config.use_roi:
        if centers is None:
            raise InputError("ROI scoring requires per-sample centers")
        rois = [ROI((int(c[0]), int(c[1])), config.roi_side) for c in centers]
        for roi in rois:
            _check_roi(roi, x_all.shape)
    if isinstance(config.mode, (BackwardOnly, ForwardBackward)):
        schedule.check_step(config.mode.steps)
    model.eval()
    out: list[AnomalyScore] = []
    mode = str(config.mode)
    for start in range(0, n, config.batch_size):
        sl = slice(start, start + config.batch_size)
        res = mode_residuals(model, x_all[sl], config.mode, schedule, sample_ids[sl], config.seed)
        values = _reduce(res, rois[sl])
        for j, v in enumerate(values):
            i = start + j
            out.append(AnomalyScore(v, mode, sample_ids[i], labels[i], rois[i], scanner_ids[i]))
    return out


@dataclass
class ScoreFailure:
    sample_id: str
    error: str

    def to_record(self) -> dict:
        return {"sample_id": self.sample_id, "error": self.error}


@dataclass
class BatchResult:
    scores: list[AnomalyScore]
    failures: list[ScoreFailure]

    def __iter__(self):
        return iter(self.scores)

    def __len__(self) -> int:
        return len(self.scores)


def score_batch(model, records: Iterable, config: DetectorConfig, schedule: NoiseSchedule,
                load: Callable | None = None) -> BatchResult:
    """Load and score manifest records; unreadable records become :class:`ScoreFailure` entries.

    ``load(record)`` must return a patch matching the model input; the default
    loads ``record.image_path`` and crops a window of the model's patch size
    around ``record.center``.
    """
    from btd.data import load_record_patch

    patch_size = model.config.patch_size
    load = load or (lambda rec: load_record_patch(rec, patch_size))
    patches, ids, centers, labels, scanners, failures = [], [], [], [], [], []
    for rec in records:
        try:
            patch, center = load(rec)
        except Exception as exc:  # noqa: BLE001 - reported per record
            log.warning("skipping %s: %s", rec.image_path, exc)
            failures.append(ScoreFailure(rec.sample_id, f"{type(exc).__name__}: {exc}"))
            continue
        patches.append(np.asarray(patch, dtype=np.float32))
        ids.append(rec.sample_id)
        centers.append(center)
        labels.append(rec.label)
        scanners.append(rec.scanner_id)
    if not patches:
        return BatchResult([], failures)
    scores = score_patches(model, np.stack(patches), config, schedule, ids, centers, labels, scanners)
    return BatchResult(scores, failures)


def score_std(values: Iterable[float]) -> float:
    v = np.asarray(list(values), dtype=np.float64)
    return float(v.std()) if v.size else math.nan
