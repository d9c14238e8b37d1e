"""Unsupervised threshold fitting from held-out benign scores."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from btd.errors import CalibrationError, ConfigError, ValidationError

log = logging.getLogger(__name__)

THRESHOLD_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Threshold:
    tau: float
    target_fpr: float
    n_benign: int
    method: str = "empirical-quantile"
    checkpoint_id: str | None = None
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"schema_version": THRESHOLD_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "Threshold":
        version = d.get("schema_version")
        if version != THRESHOLD_SCHEMA_VERSION:
            raise ConfigError(f"unsupported threshold schema version {version!r}")
        fields = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**fields)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Threshold":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _values(scores: Iterable) -> np.ndarray:
    return np.asarray([getattr(s, "value", s) for s in scores], dtype=np.float64)


def fit_threshold(benign_scores: Iterable, target_fpr: float, checkpoint_id: str | None = None) -> Threshold:
    """Smallest observed benign score ``tau`` such that at most ``target_fpr`` of the
    benign scores satisfy ``s >= tau``.

    When every benign score is identical, ``tau`` is that value and the
    threshold is marked degenerate. When ties or a tiny sample leave no observed
    value that meets the target, ``tau`` is placed just above the maximum.
    """
    if not 0.0 < target_fpr < 1.0:
        raise ConfigError(f"target_fpr={target_fpr} must lie in (0, 1)")
    s = np.sort(_values(benign_scores))
    n = s.size
    if n == 0:
        raise CalibrationError("cannot calibrate on an empty benign score set")
    if not np.all(np.isfinite(s)):
        raise CalibrationError("benign scores contain non-finite values")
    if s[0] == s[-1]:
        log.warning("all %d benign scores equal %g; threshold is degenerate", n, s[0])
        return Threshold(float(s[0]), target_fpr, n, checkpoint_id=checkpoint_id, degenerate=True)
    allowed = math.floor(target_fpr * n + 1e-9)
    # count of scores >= s[i] is n - (index of first occurrence of s[i])
    first = np.searchsorted(s, s, side="left")
    ok = (n - first) <= allowed
    if ok.any():
        tau = float(s[np.argmax(ok)])
    else:
        tau = float(np.nextafter(s[-1], np.inf))
        log.warning("no benign score meets target FPR %.3g with n=%d; tau set above the maximum", target_fpr, n)
    return Threshold(tau, target_fpr, n, checkpoint_id=checkpoint_id)


def classify(score, threshold: Threshold) -> str:
    """``'Fake'`` when the score is at or above ``tau``, else ``'Real'``."""
    value = getattr(score, "value", score)
    return "Fake" if value >= threshold.tau else "Real"


def check_binding(threshold: Threshold, checkpoint_id: str | None, override: bool = False) -> None:
    """Refuse to apply a threshold calibrated against a different checkpoint."""
    if threshold.checkpoint_id is None or checkpoint_id is None or threshold.checkpoint_id == checkpoint_id:
        return
    if override:
        log.warning("applying threshold from checkpoint %s to scores from %s", threshold.checkpoint_id, checkpoint_id)
        return
    raise ValidationError(
        f"threshold was calibrated for checkpoint {threshold.checkpoint_id}, scores come from {checkpoint_id}"
    )


def empirical_fpr(benign_scores: Iterable, threshold: Threshold) -> float:
    v = _values(benign_scores)
    return float(np.mean(v >= threshold.tau)) if v.size else math.nan
