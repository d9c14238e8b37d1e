"""Synthetic scanner-fingerprint corpora and splice/removal tampering.

Benign patches are smooth procedural anatomy plus spatially correlated
"device" noise (white noise convolved with a unit-energy kernel). Tampering
swaps the fingerprint inside a mask: injection splices donor content that
carries a foreign fingerprint, removal in-fills the mask from its boundary and
adds foreign noise. Ground truth is therefore known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import distance_transform_edt
from scipy.signal import fftconvolve
from scipy.sparse.linalg import spsolve

from btd.errors import ConfigError, InputError


def normalize_kernel(kernel) -> np.ndarray:
    k = np.atleast_2d(np.asarray(kernel, dtype=np.float64))
    energy = np.sqrt(np.sum(k**2))
    if energy == 0:
        raise ConfigError("fingerprint kernel has zero energy")
    return k / energy


def directional_kernel(length: int = 3, angle: str = "horizontal", falloff: float = 0.6) -> np.ndarray:
    """Streak-like correlation kernel along rows or columns."""
    taps = falloff ** np.abs(np.arange(length) - (length - 1) / 2)
    k = taps[None, :] if angle == "horizontal" else taps[:, None]
    return normalize_kernel(k)


def gaussian_kernel(radius: int = 2, sigma: float = 1.0) -> np.ndarray:
    ax = np.arange(-radius, radius + 1)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return normalize_kernel(g)


@dataclass(frozen=True)
class TextureParams:
    base_range: tuple[float, float] = (0.35, 0.65)
    gradient_scale: float = 0.15
    n_blobs: tuple[int, int] = (2, 6)
    blob_amplitude: float = 0.15
    blob_sigma: tuple[float, float] = (3.0, 12.0)


@dataclass(frozen=True)
class FingerprintSpec:
    device_id: str
    correlation_kernel: np.ndarray = field(default_factory=lambda: directional_kernel(3))
    noise_sigma: float = 0.06
    background_texture: TextureParams = field(default_factory=TextureParams)

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        object.__setattr__(self, "correlation_kernel", normalize_kernel(self.correlation_kernel))

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "correlation_kernel": self.correlation_kernel.tolist(),
            "noise_sigma": self.noise_sigma,
        }


HOST_FALLOFF = 0.6
# foreign kernels are slightly whiter than the host's; removal in-fill noise is the cruder forgery
FOREIGN_FALLOFF = {"inject": 0.5, "remove": 0.4}


def host_fingerprint(device_id: str = "SYN-A", noise_sigma: float = 0.06, falloff: float = HOST_FALLOFF,
                     **kw) -> FingerprintSpec:
    return FingerprintSpec(device_id, directional_kernel(3, "horizontal", falloff), noise_sigma, **kw)


def foreign_fingerprint(kind: str = "inject", device_id: str = "FOREIGN", noise_sigma: float = 0.06,
                        falloff: float | None = None, **kw) -> FingerprintSpec:
    """Same amplitude and orientation as the default host, weaker correlation."""
    falloff = FOREIGN_FALLOFF[kind] if falloff is None else falloff
    return FingerprintSpec(device_id, directional_kernel(3, "horizontal", falloff), noise_sigma, **kw)


@dataclass(frozen=True)
class Box:
    top: int
    left: int
    height: int
    width: int

    @classmethod
    def centered(cls, patch_size: int, side: int = 32) -> "Box":
        start = (patch_size - side) // 2
        return cls(start, start, side, side)

    @property
    def center(self) -> tuple[int, int]:
        return self.top + self.height // 2, self.left + self.width // 2

    def check_within(self, shape) -> None:
        h, w = shape
        if self.height < 0 or self.width < 0:
            raise InputError(f"mask {self} has negative extent")
        if self.top < 0 or self.left < 0 or self.top + self.height > h or self.left + self.width > w:
            raise InputError(f"mask {self} exceeds patch bounds {h}x{w}")

    def as_mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.top:self.top + self.height, self.left:self.left + self.width] = True
        return m

    def to_dict(self) -> dict:
        return {"top": self.top, "left": self.left, "height": self.height, "width": self.width}


@dataclass(frozen=True)
class TamperRecipe:
    kind: str
    mask: Box
    blend_width: int = 3
    foreign_fingerprint: FingerprintSpec | None = None

    def __post_init__(self):
        if self.kind not in ("Inject", "Remove"):
            raise ConfigError(f"unknown tamper kind {self.kind!r}")
        if self.blend_width < 0:
            raise ConfigError("blend_width must be >= 0")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "mask": self.mask.to_dict(), "blend_width": self.blend_width}
        if self.foreign_fingerprint is not None:
            d["foreign_fingerprint"] = self.foreign_fingerprint.to_dict()
        return d


def fingerprint_noise(spec: FingerprintSpec, shape, rng: np.random.Generator) -> np.ndarray:
    """Device noise: white noise filtered by the kernel, scaled to ``noise_sigma``."""
    k = spec.correlation_kernel
    kh, kw = k.shape
    white = rng.standard_normal((shape[0] + kh - 1, shape[1] + kw - 1))
    return spec.noise_sigma * fftconvolve(white, k, mode="valid")


def render_content(texture: TextureParams, size: int, rng: np.random.Generator, tumor: bool = False,
                   tumor_center=None) -> np.ndarray:
    """Noise-free anatomy-like field: offset, linear gradient, Gaussian blobs, optional bright lesion."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(*texture.base_range)
    gy, gx = rng.uniform(-texture.gradient_scale, texture.gradient_scale, size=2)
    img = base + gy * (yy / size - 0.5) + gx * (xx / size - 0.5)
    for _ in range(rng.integers(texture.n_blobs[0], texture.n_blobs[1] + 1)):
        cy, cx = rng.uniform(0, size, size=2)
        s = rng.uniform(*texture.blob_sigma)
        a = rng.uniform(-texture.blob_amplitude, texture.blob_amplitude)
        img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s**2))
    if tumor:
        cy, cx = tumor_center if tumor_center is not None else (size / 2, size / 2)
        cy += rng.uniform(-3, 3)
        cx += rng.uniform(-3, 3)
        r = rng.uniform(4.0, 9.0)
        lesion = 1.0 / (1.0 + np.exp((np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) - r) / 1.2))
        img += rng.uniform(0.15, 0.25) * lesion
    return np.clip(img, 0.08, 0.92)


def render_benign(spec: FingerprintSpec, size: int, rng: np.random.Generator, tumor: bool = False):
    """Return ``(content, noise)``; the patch is ``clip(content + noise, 0, 1)``."""
    content = render_content(spec.background_texture, size, rng, tumor=tumor)
    return content, fingerprint_noise(spec, (size, size), rng)


def _item_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def synth_benign(spec: FingerprintSpec, n: int, seed: int, size: int = 64, tumor_fraction: float = 0.0) -> np.ndarray:
    """``n`` float32 patches in [0, 1], shape ``(n, size, size)``.

    Item ``i`` depends only on ``(seed, i)``, so a longer corpus extends a
    shorter one. Each item carries a bright lesion near the center with
    probability ``tumor_fraction``.
    """
    out = np.empty((n, size, size), dtype=np.float32)
    for i, rng in enumerate(_item_rngs(seed, n)):
        tumor = rng.random() < tumor_fraction
        content, noise = render_benign(spec, size, rng, tumor=tumor)
        out[i] = np.clip(content + noise, 0.0, 1.0)
    return out


def feather_alpha(mask: np.ndarray, blend_width: int) -> np.ndarray:
    """1 inside ``mask``, ramping linearly to 0 over ``blend_width`` pixels outside it."""
    alpha = mask.astype(np.float64)
    if blend_width > 0 and mask.any():
        dist = distance_transform_edt(~mask)
        ring = (dist > 0) & (dist <= blend_width)
        alpha[ring] = 1.0 - dist[ring] / (blend_width + 1)
    return alpha


def inject_tamper(patch: np.ndarray, recipe: TamperRecipe, donor_patch: np.ndarray | None = None,
                  seed: int = 0) -> np.ndarray:
    """Splice donor content into ``recipe.mask`` with a feathered edge.

    Without a donor, one is synthesized from ``seed``: a lesion-bearing patch
    carrying ``recipe.foreign_fingerprint``. Pixels farther than
    ``blend_width`` from the mask are returned bit-identical.
    """
    if recipe.kind != "Inject":
        raise InputError(f"inject_tamper needs an Inject recipe, got {recipe.kind}")
    patch = np.asarray(patch)
    recipe.mask.check_within(patch.shape)
    if donor_patch is None:
        if recipe.foreign_fingerprint is None:
            raise InputError("no donor patch and no foreign fingerprint to synthesize one")
        rng = np.random.default_rng(seed)
        spec = recipe.foreign_fingerprint
        content = render_content(spec.background_texture, patch.shape[0], rng, tumor=True,
                                 tumor_center=recipe.mask.center)
        donor_patch = np.clip(content + fingerprint_noise(spec, patch.shape, rng), 0.0, 1.0)
    donor_patch = np.asarray(donor_patch)
    if donor_patch.shape != patch.shape:
        raise InputError(f"donor shape {donor_patch.shape} differs from patch shape {patch.shape}")
    alpha = feather_alpha(recipe.mask.as_mask(patch.shape), recipe.blend_width)
    touched = alpha > 0
    out = patch.copy()
    out[touched] = (alpha[touched] * donor_patch[touched] + (1 - alpha[touched]) * patch[touched]).astype(patch.dtype)
    return out


def harmonic_fill(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace ``mask`` pixels with the discrete harmonic interpolant of their surroundings.

    Solves the 5-point Laplace equation inside the mask with the unmasked
    neighbours as Dirichlet data (image borders act as reflecting edges).
    """
    out = np.asarray(image, dtype=np.float64).copy()
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return out
    h, w = mask.shape
    order = -np.ones(mask.size, dtype=np.int64)
    order[idx] = np.arange(idx.size)
    rows, cols, vals = [], [], []
    rhs = np.zeros(idx.size)
    for k, flat in enumerate(idx):
        r, c = divmod(int(flat), w)
        nbrs = [(r + dr, c + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                if 0 <= r + dr < h and 0 <= c + dc < w]
        rows.append(k), cols.append(k), vals.append(float(len(nbrs)))
        for rr, cc in nbrs:
            j = order[rr * w + cc]
            if j >= 0:
                rows.append(k), cols.append(int(j)), vals.append(-1.0)
            else:
                rhs[k] += out[rr, cc]
    A = sp.csr_matrix((vals, (rows, cols)), shape=(idx.size, idx.size))
    out.flat[idx] = spsolve(A, rhs)
    return out


def remove_tamper(patch: np.ndarray, recipe: TamperRecipe, seed: int = 0) -> np.ndarray:
    """Erase ``recipe.mask`` by harmonic in-fill plus foreign-fingerprint noise."""
    if recipe.kind != "Remove":
        raise InputError(f"remove_tamper needs a Remove recipe, got {recipe.kind}")
    patch = np.asarray(patch)
    recipe.mask.check_within(patch.shape)
    mask = recipe.mask.as_mask(patch.shape)
    if not mask.any():
        return patch.copy()
    filled = harmonic_fill(patch, mask)
    if recipe.foreign_fingerprint is not None:
        rng = np.random.default_rng(seed)
        filled += fingerprint_noise(recipe.foreign_fingerprint, patch.shape, rng)
    out = patch.copy()
    out[mask] = np.clip(filled[mask], 0.0, 1.0).astype(patch.dtype)
    return out


@dataclass
class Corpus:
    """In-memory labelled corpus; ``labels`` use the TB/TM/FB/FM vocabulary."""

    patches: np.ndarray
    labels: list[str]
    scanner_ids: list[str]
    centers: list[tuple[int, int]]
    recipes: list[dict | None]

    @property
    def is_fake(self) -> np.ndarray:
        return np.array([lab in ("FB", "FM") for lab in self.labels])

    def __len__(self) -> int:
        return len(self.labels)


def make_corpus(kind: str, hosts: list[FingerprintSpec], n_real: int, n_fake: int, seed: int, size: int = 64,
                foreign: FingerprintSpec | None = None, side: int = 32, blend_width: int = 3) -> Corpus:
    """Balanced tamper corpus, hosts assigned round-robin.

    ``kind='inject'``: real items are lesion-bearing host patches (TM), fake
    items get a spliced foreign lesion (FM). ``kind='remove'``: real items are
    lesion-free (TB), fake items have a lesion erased (FB).
    """
    if kind not in ("inject", "remove"):
        raise ConfigError(f"corpus kind must be 'inject' or 'remove', got {kind!r}")
    foreign = foreign or foreign_fingerprint(kind)
    box = Box.centered(size, side)
    recipe = TamperRecipe("Inject" if kind == "inject" else "Remove", box, blend_width if kind == "inject" else 0,
                          foreign)
    n = n_real + n_fake
    patches = np.empty((n, size, size), dtype=np.float32)
    labels, scanners, recipes = [], [], []
    for i, rng in enumerate(_item_rngs(seed, n)):
        host = hosts[i % len(hosts)]
        fake = i >= n_real
        tumor = kind == "inject" and not fake or kind == "remove" and fake
        content, noise = render_benign(host, size, rng, tumor=tumor)
        x = np.clip(content + noise, 0.0, 1.0).astype(np.float32)
        if fake:
            sub = int(rng.integers(2**31))
            x = inject_tamper(x, recipe, seed=sub) if kind == "inject" else remove_tamper(x, recipe, seed=sub)
            labels.append("FM" if kind == "inject" else "FB")
            recipes.append(recipe.to_dict() | {"seed": sub})
        else:
            labels.append("TM" if kind == "inject" else "TB")
            recipes.append(None)
        patches[i] = x
        scanners.append(host.device_id)
    return Corpus(patches, labels, scanners, [box.center] * n, recipes)


def with_partial_swap(patch_content: np.ndarray, host_noise: np.ndarray, foreign_noise: np.ndarray,
                      box: Box, fraction: float) -> np.ndarray:
    """Replace the host noise by foreign noise on the first ``fraction`` of ``box`` rows."""
    rows = int(round(fraction * box.height))
    swapped = replace(box, height=rows).as_mask(host_noise.shape)
    noise = np.where(swapped, foreign_noise, host_noise)
    return np.clip(patch_content + noise, 0.0, 1.0)
