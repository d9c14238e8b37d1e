"""U-Net noise predictor ``F(x_t, t)``."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from btd.errors import ConfigError, InputError


@dataclass(frozen=True)
class ModelConfig:
    init_features: int = 32
    depth: int = 3
    in_channels: int = 1
    batch_size: int = 64
    patch_size: int = 96

    def validate(self) -> None:
        if self.init_features < 1:
            raise ConfigError(f"init_features must be >= 1, got {self.init_features}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_size < 1 or self.patch_size % (2 ** self.depth):
            raise ConfigError(
                f"patch_size={self.patch_size} is not divisible by 2**depth={2 ** self.depth}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__})


def _groups(channels: int) -> int:
    # one channel per group would normalize away the per-channel time shift
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 4:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape ``(len(t), dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = t.float()[:, None] * freqs[None, :].to(t.device)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class NoisePredictor(nn.Module):
    """Encoder-decoder with one skip connection per level.

    Level ``l`` carries ``init_features * 2**l`` channels; the bottleneck sits
    below the last downsampling. The output convolution starts at zero so an
    untrained model predicts zero noise.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.training_steps = 0
        c0 = config.init_features
        self.tdim = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, self.tdim), nn.SiLU(), nn.Linear(self.tdim, self.tdim))
        self.stem = nn.Conv2d(config.in_channels, c0, 3, padding=1)

        widths = [c0 * 2 ** level for level in range(config.depth)]
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = c0
        for w in widths:
            self.down_blocks.append(ResBlock(ch, w, self.tdim))
            self.downsamples.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            ch = w
        self.mid = ResBlock(ch, c0 * 2 ** config.depth, self.tdim)
        ch = c0 * 2 ** config.depth
        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for w in reversed(widths):
            self.upsamples.append(nn.Conv2d(ch, w, 3, padding=1))
            self.up_blocks.append(ResBlock(2 * w, w, self.tdim))
            ch = w
        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out = nn.Conv2d(ch, config.in_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.config.init_features).to(x.dtype))
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, seed: int = 0) -> NoisePredictor:
    """Instantiate a predictor with weights drawn from ``seed``."""
    config.validate()
    devices = []
    with torch.random.fork_rng(devices=devices):
        torch.manual_seed(seed)
        model = NoisePredictor(config)
    return model


def predict_noise(model: NoisePredictor, x: torch.Tensor, t) -> torch.Tensor:
    """Evaluate ``F(x, t)`` without tracking gradients.

    ``x`` may be a single ``(H, W)`` patch, ``(C, H, W)`` or a batch
    ``(N, C, H, W)``; the output has the same shape and dtype.

    The network runs in float64 here so a batched call matches per-item calls
    to within float32 rounding. The batch scorers call the module directly in
    float32 for speed.
    """
    cfg = model.config
    x = torch.as_tensor(x, dtype=torch.float32) if not isinstance(x, torch.Tensor) else x
    orig_shape = x.shape
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[-2:] != (cfg.patch_size, cfg.patch_size):
        raise InputError(
            f"input shape {tuple(orig_shape)} incompatible with model patch "
            f"{cfg.in_channels}x{cfg.patch_size}x{cfg.patch_size}"
        )
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        steps = t.long()
    else:
        steps = torch.full((x.shape[0],), int(t), dtype=torch.long)
    params = {k: v.double() for k, v in model.state_dict().items()}
    with torch.no_grad():
        out = torch.func.functional_call(model, params, (x.double(), steps.to(x.device)))
    return out.to(x.dtype).reshape(orig_shape)
