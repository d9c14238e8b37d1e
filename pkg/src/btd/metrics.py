"""ROC/AUC/EER and the scanner-balanced bootstrap protocol.

Labels are booleans (``True`` = fake) or the strings ``Real``/``Fake`` or
TB/TM/FB/FM. Higher scores mean "more likely fake".
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from btd.errors import MetricError

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
FAKE_LABELS = {"fake", "fb", "fm"}
REAL_LABELS = {"real", "tb", "tm"}


def as_fake_flags(labels) -> np.ndarray:
    out = []
    for lab in labels:
        if isinstance(lab, (bool, np.bool_)) or isinstance(lab, (int, np.integer)):
            out.append(bool(lab))
            continue
        key = str(lab).strip().lower()
        if key in FAKE_LABELS:
            out.append(True)
        elif key in REAL_LABELS:
            out.append(False)
        else:
            raise MetricError(f"unknown label {lab!r}")
    return np.asarray(out, dtype=bool)


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = as_fake_flags(labels)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if y.all() or not y.any():
        raise MetricError("both real and fake samples are required")
    return s, y


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC operating points, one per distinct score (classify fake iff score >= threshold).

    Returns ``(fpr, tpr, thresholds)`` starting at (0, 0) with threshold +inf.
    """
    s, y = _prepare(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[distinct]
    fp = np.cumsum(~y)[distinct]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return fpr, tpr, np.r_[np.inf, s[distinct]]


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC; equals P(fake > real) + P(tie) / 2."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def eer(scores, labels) -> float:
    """Rate where FPR equals FNR, interpolating linearly between ROC points."""
    fpr, tpr, _ = roc_curve(scores, labels)
    gap = fpr - (1.0 - tpr)
    i = int(np.argmax(gap >= 0))
    if gap[i] == 0 or i == 0:
        return float(fpr[i])
    w = gap[i - 1] / (gap[i - 1] - gap[i])
    return float(fpr[i - 1] + w * (fpr[i] - fpr[i - 1]))


@dataclass
class EvalReport:
    auc: float
    eer: float
    auc_std: float
    eer_std: float
    roc_points: list[tuple[float, float]]
    per_scanner: dict[str, tuple[float, float]]
    iterations: int
    n_real: int
    n_fake: int
    excluded_scanners: list[str] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc_points"] = [list(p) for p in self.roc_points]
        d["per_scanner"] = {k: {"auc": v[0], "eer": v[1]} for k, v in self.per_scanner.items()}
        return {"schema_version": REPORT_SCHEMA_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise MetricError(f"unsupported report schema version {d.get('schema_version')!r}")
        d = {k: v for k, v in d.items() if k != "schema_version"}
        d["roc_points"] = [tuple(p) for p in d["roc_points"]]
        d["per_scanner"] = {k: (v["auc"], v["eer"]) for k, v in d["per_scanner"].items()}
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def table(self, title: str = "overall") -> str:
        rows = [("Scanner", "AUC", "EER")]
        rows += [(k, f"{a:.4f}", f"{e:.4f}") for k, (a, e) in sorted(self.per_scanner.items())]
        rows.append((title, f"{self.auc:.4f}", f"{self.eer:.4f}"))
        return format_table(rows)

    def plot_roc(self, path, label: str = "BTD") -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fpr, tpr = zip(*self.roc_points)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(fpr, tpr, label=f"{label} (AUC {self.auc:.3f})")
        ax.plot([0, 1], [0, 1], "k--", lw=0.8)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def format_table(rows: Sequence[Sequence[str]]) -> str:
    """Left-align the first column, right-align the rest."""
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for n, row in enumerate(rows):
        cells = [str(row[0]).ljust(widths[0])] + [str(c).rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _balanced_indices(groups: dict, rng: np.random.Generator, resample: bool) -> np.ndarray:
    picks = []
    for real_idx, fake_idx in groups.values():
        m = min(real_idx.size, fake_idx.size)
        for idx in (real_idx, fake_idx):
            picks.append(rng.choice(idx, size=m, replace=True) if resample else rng.permutation(idx)[:m])
    return np.concatenate(picks)


def bootstrap_eval(scores, labels, scanner_ids=None, iterations: int = 100, seed: int = 0,
                   resample: bool = True) -> EvalReport:
    """Mean AUC/EER over ``iterations`` scanner-balanced resamples.

    Per iteration and scanner, ``min(n_real, n_fake)`` items are drawn per
    class (with replacement unless ``resample=False``). Iteration ``i`` uses
    its own generator seeded by ``(seed, i)``. Scanners lacking one class are
    dropped with a warning.
    """
    s, y = _prepare(scores, labels)
    if iterations < 1:
        raise MetricError("iterations must be >= 1")
    scanners = np.asarray(["all"] * s.size if scanner_ids is None else [str(x) for x in scanner_ids])
    if scanners.size != s.size:
        raise MetricError(f"{s.size} scores but {scanners.size} scanner ids")
    groups, excluded = {}, []
    for sc in sorted(set(scanners)):
        idx = np.flatnonzero(scanners == sc)
        real, fake = idx[~y[idx]], idx[y[idx]]
        if real.size == 0 or fake.size == 0:
            log.warning("scanner %s lacks one class and is excluded from the bootstrap", sc)
            excluded.append(sc)
            continue
        groups[sc] = (real, fake)
    if not groups:
        raise MetricError("no scanner has both real and fake samples")

    aucs, eers = [], []
    per = defaultdict(lambda: ([], []))
    for it in range(iterations):
        rng = np.random.default_rng([seed, it])
        pick = _balanced_indices(groups, rng, resample)
        aucs.append(roc_auc(s[pick], y[pick]))
        eers.append(eer(s[pick], y[pick]))
        if len(groups) > 1:
            for sc, grp in groups.items():
                sub = _balanced_indices({sc: grp}, rng, resample)
                per[sc][0].append(roc_auc(s[sub], y[sub]))
                per[sc][1].append(eer(s[sub], y[sub]))
    if len(groups) == 1:
        per = {next(iter(groups)): (aucs, eers)}
    used = np.concatenate([np.r_[r, f] for r, f in groups.values()])
    fpr, tpr, _ = roc_curve(s[used], y[used])
    return EvalReport(
        auc=float(np.mean(aucs)),
        eer=float(np.mean(eers)),
        auc_std=float(np.std(aucs)),
        eer_std=float(np.std(eers)),
        roc_points=[(float(a), float(b)) for a, b in zip(fpr, tpr)],
        per_scanner={k: (float(np.mean(v[0])), float(np.mean(v[1]))) for k, v in per.items()},
        iterations=iterations,
        n_real=int((~y).sum()),
        n_fake=int(y.sum()),
        excluded_scanners=excluded,
        seed=seed,
    )
