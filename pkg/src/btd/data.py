"""Normalization, patch extraction, manifests and patient-level splits.

Manifests are JSON Lines. The first line is a header::

    {"format": "btd-manifest", "schema_version": 1, "modality": "CT"}

and every following line is one :class:`SampleRecord` with fields in
``RECORD_FIELDS`` order. Relative ``image_path`` values resolve against the
manifest's directory. Images are float32 ``.npy`` arrays already scaled to
[0, 1] (``.npz`` with an ``image`` key and 8/16-bit PNG are also read).
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from btd.errors import ConfigError, DataError, ValidationError

MANIFEST_SCHEMA_VERSION = 1
LABELS = ("TB", "TM", "FB", "FM")
TRUE_LABELS = ("TB", "TM")
MODALITIES = ("CT", "MRI")
PATCH_SIZES = {"CT": 96, "MRI": 128}
CT_WINDOW = (-700.0, 2000.0)
RECORD_FIELDS = ("image_path", "label", "patient_id", "scanner_id", "modality", "center", "tumor_size", "sample_id")


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: str
    patient_id: str
    scanner_id: str
    modality: str
    center: tuple[int, int]
    tumor_size: float | None = None
    sample_id: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"label {self.label!r} not one of {LABELS}")
        if self.modality not in MODALITIES:
            raise ValidationError(f"modality {self.modality!r} not one of {MODALITIES}")
        object.__setattr__(self, "center", (int(self.center[0]), int(self.center[1])))
        if not self.sample_id:
            object.__setattr__(self, "sample_id", Path(self.image_path).stem)

    @property
    def is_fake(self) -> bool:
        return self.label in ("FB", "FM")

    def to_dict(self) -> dict:
        return {
            "image_path": self.image_path,
            "label": self.label,
            "patient_id": self.patient_id,
            "scanner_id": self.scanner_id,
            "modality": self.modality,
            "center": list(self.center),
            "tumor_size": self.tumor_size,
            "sample_id": self.sample_id,
        }


@dataclass
class Manifest:
    records: list[SampleRecord]
    modality: str
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"modality {self.modality!r} not one of {MODALITIES}")
        seen = set()
        for rec in self.records:
            if rec.modality != self.modality:
                raise ValidationError(
                    f"record {rec.image_path} has modality {rec.modality}, manifest is {self.modality}"
                )
            if rec.image_path in seen:
                raise ValidationError(f"duplicate image_path {rec.image_path}")
            seen.add(rec.image_path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def patients(self) -> set[str]:
        return {r.patient_id for r in self.records}

    def resolve(self, rec: SampleRecord) -> Path:
        p = Path(rec.image_path)
        return p if p.is_absolute() else self.root / p

    def resolved_records(self) -> list[SampleRecord]:
        """Records with absolute image paths, ready for loading."""
        return [replace(r, image_path=str(self.resolve(r))) for r in self.records]

    def subset(self, records: Sequence[SampleRecord]) -> "Manifest":
        return Manifest(list(records), self.modality, self.schema_version, self.root)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    header = {"format": "btd-manifest", "schema_version": manifest.schema_version, "modality": manifest.modality}
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise DataError(f"manifest {path} is empty (missing header)")
    header = json.loads(lines[0])
    if header.get("format") != "btd-manifest":
        raise DataError(f"{path} is not a btd manifest")
    if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"unsupported manifest schema version {header.get('schema_version')!r}")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        d = json.loads(line)
        try:
            records.append(SampleRecord(
                image_path=d["image_path"], label=d["label"], patient_id=str(d["patient_id"]),
                scanner_id=str(d["scanner_id"]), modality=d["modality"], center=tuple(d["center"]),
                tumor_size=d.get("tumor_size"), sample_id=d.get("sample_id") or "",
            ))
        except KeyError as exc:
            raise DataError(f"{path}:{n}: missing field {exc}") from exc
    return Manifest(records, header["modality"], header["schema_version"], path.parent)


def normalize_ct(raw) -> np.ndarray:
    """Clip Hounsfield units to [-700, 2000] and map linearly onto [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataError("CT intensities contain non-finite values")
    lo, hi = CT_WINDOW
    return (np.clip(raw, lo, hi) - lo) / (hi - lo)


def denormalize_ct(x) -> np.ndarray:
    lo, hi = CT_WINDOW
    return np.asarray(x, dtype=np.float64) * (hi - lo) + lo


def normalize_mri(volume, patient_id: str = "?") -> np.ndarray:
    """Z-score with the patient's own statistics, then min-max to [0, 1]."""
    v = np.asarray(volume, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DataError(f"MRI volume of patient {patient_id} contains non-finite values")
    std = v.std()
    if v.size == 0 or std == 0 or v.max() == v.min():
        raise DataError(f"MRI volume of patient {patient_id} has zero intensity spread")
    z = (v - v.mean()) / std
    return (z - z.min()) / (z.max() - z.min())


def patch_window(shape, center, size: int) -> tuple[slice, slice]:
    h, w = shape[-2:]
    if h < size or w < size:
        raise DataError(f"image {h}x{w} is smaller than the {size}x{size} patch window")
    r0 = min(max(int(center[0]) - size // 2, 0), h - size)
    c0 = min(max(int(center[1]) - size // 2, 0), w - size)
    return slice(r0, r0 + size), slice(c0, c0 + size)


def extract_patch(image, center, modality: str, size: int | None = None) -> np.ndarray:
    """Crop the modality's window (96 CT, 128 MRI) around ``center``, shifted inward at borders."""
    if size is None:
        if modality not in PATCH_SIZES:
            raise ConfigError(f"unknown modality {modality!r}")
        size = PATCH_SIZES[modality]
    image = np.asarray(image)
    rs, cs = patch_window(image.shape, center, size)
    return image[..., rs, cs].copy()


def load_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".npy":
            img = np.load(path)
        elif suffix == ".npz":
            with np.load(path) as z:
                img = z["image"]
        else:
            with Image.open(path) as im:
                img = np.asarray(im)
            scale = 65535.0 if img.dtype == np.uint16 or img.max() > 255 else 255.0
            img = img.astype(np.float64) / scale
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise DataError(f"image {path} has shape {img.shape}, expected 2-D")
    return img


def save_patch(path, patch, preview: bool = False) -> None:
    """Write a float32 ``.npy`` patch; optionally a 16-bit PNG beside it for inspection."""
    path = Path(path)
    arr = np.asarray(patch, dtype=np.float32)
    np.save(path, arr)
    if preview:
        img = np.round(np.clip(arr, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(img).save(path.with_suffix(".png"))


def load_record_patch(rec: SampleRecord, patch_size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Load a record's image and return ``(patch, center within the patch)``."""
    img = load_image(rec.image_path)
    if img.shape == (patch_size, patch_size):
        patch, center = img, rec.center
    else:
        rs, cs = patch_window(img.shape, rec.center, patch_size)
        patch, center = img[rs, cs], (rec.center[0] - rs.start, rec.center[1] - cs.start)
    if not np.all(np.isfinite(patch)) or patch.min() < -1e-6 or patch.max() > 1 + 1e-6:
        raise DataError(f"patch from {rec.image_path} is not normalized to [0, 1]")
    return patch, center


def check_training_labels(records: Iterable[SampleRecord]) -> None:
    """Raise if any record carries a fake label; the message lists them."""
    bad = [r for r in records if r.label not in TRUE_LABELS]
    if bad:
        listing = ", ".join(f"{r.sample_id}({r.label})" for r in bad[:20])
        more = f" and {len(bad) - 20} more" if len(bad) > 20 else ""
        raise ValidationError(f"{len(bad)} fake-labelled records in training data: {listing}{more}")


def split_by_patient(manifest: Manifest, train_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Assign whole patients to train/validation.

    ``floor(n_patients * train_fraction)`` patients go to train, clamped so
    both sides get at least one. Only TB/TM records are accepted.
    """
    check_training_labels(manifest.records)
    patients = sorted(manifest.patients)
    if len(patients) < 2:
        raise ValidationError("a patient split needs at least two distinct patients")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction={train_fraction} must lie in (0, 1)")
    n_train = min(max(math.floor(len(patients) * train_fraction + 1e-9), 1), len(patients) - 1)
    order = np.random.default_rng(seed).permutation(len(patients))
    train_ids = {patients[i] for i in order[:n_train]}
    train = [r for r in manifest.records if r.patient_id in train_ids]
    val = [r for r in manifest.records if r.patient_id not in train_ids]
    return manifest.subset(train), manifest.subset(val)


def patient_overlap(a: Manifest, b: Manifest) -> set[str]:
    return a.patients & b.patients


def sample_benign_centers(tumor_centers: dict[str, list[tuple[int, int]]], patient_id: str, n: int,
                          rng: np.random.Generator) -> list[tuple[int, int]]:
    """Draw ROI centers for benign crops from other patients' tumor locations."""
    pool = [c for pid, cs in tumor_centers.items() if pid != patient_id for c in cs]
    if not pool:
        raise DataError(f"no tumor locations from patients other than {patient_id}")
    idx = rng.integers(0, len(pool), size=n)
    return [tuple(pool[i]) for i in idx]


def load_patches(manifest: Manifest, patch_size: int) -> np.ndarray:
    """Stack every record's patch into ``(N, patch_size, patch_size)`` float32."""
    if not len(manifest):
        return np.empty((0, patch_size, patch_size), dtype=np.float32)
    return np.stack([load_record_patch(r, patch_size)[0] for r in manifest.resolved_records()]).astype(np.float32)


def group_by(records: Iterable[SampleRecord], key: str) -> dict[str, list[SampleRecord]]:
    out = defaultdict(list)
    for r in records:
        out[getattr(r, key)].append(r)
    return dict(out)
