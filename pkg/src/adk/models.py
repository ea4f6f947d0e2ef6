"""Denoising and segmentation sub-networks.

Both are small residual U-Nets. With gradients disabled every layer avoids
batch-size-dependent BLAS paths, so a batched forward pass is bitwise
identical to stacking single-sample passes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics

GROUPS = 8


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 128
    attention_at_lowest: bool = True
    heads: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 8 or self.base_channels % GROUPS:
            raise ValueError(f"base_channels must be a multiple of {GROUPS} and >= 8")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")


@dataclass(frozen=True)
class SegmenterConfig:
    in_channels: int = 6
    base_channels: int = 32
    depth: int = 2

    def __post_init__(self):
        if self.in_channels % 2:
            raise ValueError("segmenter input channels must be even (image + reconstruction)")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 8 or self.base_channels % GROUPS:
            raise ValueError(f"base_channels must be a multiple of {GROUPS} and >= 8")


def time_embedding(t: int | torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]``, ``w_k = 10000^(-2k/dim)``.

    An int ``t`` gives a ``[dim]`` vector, a tensor of steps gives ``[N, dim]``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    steps = torch.as_tensor(t, dtype=torch.float64)
    if (steps < 0).any():
        raise ValueError("timesteps must be non-negative")
    k = torch.arange(dim // 2, dtype=torch.float64)
    freqs = 10000.0 ** (-2.0 * k / dim)
    angles = steps.reshape(-1, 1) * freqs
    emb = torch.stack([angles.sin(), angles.cos()], dim=-1).reshape(-1, dim)
    return emb[0] if steps.ndim == 0 else emb


class RowLinear(nn.Module):
    """Affine map evaluated row by row (batch-size independent rounding)."""

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(torch.empty(n_out, n_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(n_out).uniform_(-bound, bound))

    def forward(self, x):
        return (x[:, None, :] * self.weight).sum(-1) + self.bias


class Conv(nn.Conv2d):
    def forward(self, x):
        if x.shape[0] > 1 and (self.in_channels < GROUPS or not torch.is_grad_enabled()):
            # oneDNN picks batch-size-dependent kernels (always for few input channels,
            # and at small spatial sizes); inference pays the per-sample cost so its
            # results never depend on how images were batched.
            return torch.cat([self.forward(x[i : i + 1]) for i in range(x.shape[0])])
        return numerics.conv2d(x, self.weight, self.bias, stride=self.stride[0], padding=self.padding[0])


def row_silu(x: torch.Tensor) -> torch.Tensor:
    """SiLU on short per-sample vectors; the vector kernel rounds row tails batch-dependently."""
    if x.shape[0] > 1 and not torch.is_grad_enabled():
        return torch.cat([F.silu(x[i : i + 1]) for i in range(x.shape[0])])
    return F.silu(x)


def conv3(c_in, c_out, stride=1):
    return Conv(c_in, c_out, 3, stride=stride, padding=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, embed_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPS, c_in)
        self.conv1 = conv3(c_in, c_out)
        self.embed = RowLinear(embed_dim, c_out) if embed_dim else None
        self.norm2 = nn.GroupNorm(GROUPS, c_out)
        self.conv2 = conv3(c_out, c_out)
        self.skip = Conv(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.embed is not None:
            h = h + self.embed(row_silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels do not split into {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(GROUPS, channels)
        self.qkv = Conv(channels, 3 * channels, 1)
        self.out = Conv(channels, channels, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, self.heads, c // self.heads, h * w).unbind(1)
        scores = (q.transpose(-1, -2) @ k) / math.sqrt(c // self.heads)
        attended = v @ scores.softmax(-1).transpose(-1, -2)
        return x + self.out(attended.reshape(n, c, h, w))


class Upsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = conv3(c_in, c_out)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class Denoiser(nn.Module):
    """Predicts the noise in ``x_t`` given the timestep ``t``."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        b, e = config.base_channels, config.time_embed_dim
        channels = [b * 2**i for i in range(config.depth + 1)]
        self.time_in = RowLinear(e, e)
        self.time_out = RowLinear(e, e)
        self.conv_in = conv3(config.in_channels, b)
        self.down_blocks = nn.ModuleList(ResBlock(channels[i], channels[i], e) for i in range(config.depth))
        self.downsamples = nn.ModuleList(conv3(channels[i], channels[i + 1], stride=2) for i in range(config.depth))
        self.mid1 = ResBlock(channels[-1], channels[-1], e)
        self.attn = Attention(channels[-1], config.heads) if config.attention_at_lowest else nn.Identity()
        self.mid2 = ResBlock(channels[-1], channels[-1], e)
        self.upsamples = nn.ModuleList(Upsample(channels[i + 1], channels[i]) for i in reversed(range(config.depth)))
        self.up_blocks = nn.ModuleList(ResBlock(2 * channels[i], channels[i], e) for i in reversed(range(config.depth)))
        self.norm_out = nn.GroupNorm(GROUPS, b)
        self.conv_out = conv3(b, config.in_channels)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        check_spatial(x, self.config.depth)
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        emb = time_embedding(t, self.config.time_embed_dim).to(x.dtype)
        emb = self.time_out(row_silu(self.time_in(emb)))
        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.attn(self.mid1(h, emb)), emb)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = block(torch.cat([up(h), skips.pop()], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class Segmenter(nn.Module):
    """Per-pixel anomaly probability from ``concat(x0, reconstruction)``."""

    def __init__(self, config: SegmenterConfig = SegmenterConfig()):
        super().__init__()
        self.config = config
        b = config.base_channels
        channels = [b * 2**i for i in range(config.depth + 1)]
        self.conv_in = conv3(config.in_channels, b)
        self.down_blocks = nn.ModuleList(ResBlock(channels[i], channels[i]) for i in range(config.depth))
        self.downsamples = nn.ModuleList(conv3(channels[i], channels[i + 1], stride=2) for i in range(config.depth))
        self.mid = ResBlock(channels[-1], channels[-1])
        self.upsamples = nn.ModuleList(Upsample(channels[i + 1], channels[i]) for i in reversed(range(config.depth)))
        self.up_blocks = nn.ModuleList(ResBlock(2 * channels[i], channels[i]) for i in reversed(range(config.depth)))
        self.norm_out = nn.GroupNorm(GROUPS, b)
        self.conv_out = Conv(b, 1, 1)

    def forward(self, x0: torch.Tensor, x0_hat: torch.Tensor) -> torch.Tensor:
        if x0.shape != x0_hat.shape:
            raise ValueError(f"image {tuple(x0.shape)} and reconstruction {tuple(x0_hat.shape)} differ in shape")
        check_spatial(x0, self.config.depth)
        h = self.conv_in(torch.cat([x0, x0_hat], dim=1))
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h)
            skips.append(h)
            h = down(h)
        h = self.mid(h)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = block(torch.cat([up(h), skips.pop()], dim=1))
        return torch.sigmoid(self.conv_out(F.silu(self.norm_out(h))))


def check_spatial(x: torch.Tensor, depth: int) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected an [N, C, H, W] batch, got shape {tuple(x.shape)}")
    factor = 2**depth
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ValueError(f"spatial size {tuple(x.shape[2:])} is not divisible by 2^depth = {factor}")


class ModelBundle:
    """Denoiser + segmenter pair with a shared precision and a checkpoint format."""

    def __init__(
        self,
        denoiser_config: DenoiserConfig = DenoiserConfig(),
        segmenter_config: SegmenterConfig | None = None,
        seed: int = 0,
        precision: str = "float32",
    ):
        if segmenter_config is None:
            segmenter_config = SegmenterConfig(in_channels=2 * denoiser_config.in_channels)
        if segmenter_config.in_channels != 2 * denoiser_config.in_channels:
            raise ValueError("segmenter must take twice the denoiser's image channels")
        self.precision = precision
        dtype = numerics.resolve_dtype(precision)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.denoiser = Denoiser(denoiser_config).to(dtype)
            self.segmenter = Segmenter(segmenter_config).to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return numerics.resolve_dtype(self.precision)

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.denoiser.parameters()) + list(self.segmenter.parameters())

    def named_tensors(self) -> dict[str, torch.Tensor]:
        named = {f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()}
        named.update({f"segmenter.{k}": v for k, v in self.segmenter.state_dict().items()})
        return named

    def all_finite(self) -> bool:
        return all(torch.isfinite(p).all() for p in self.parameters())

    def save(self, path: str | Path) -> None:
        meta = {
            "denoiser": asdict(self.denoiser.config),
            "segmenter": asdict(self.segmenter.config),
        }
        numerics.save_tensors(path, self.named_tensors(), precision=self.precision, metadata=json.dumps(meta))

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        tensors, precision, metadata = numerics.load_tensors(path)
        meta = json.loads(metadata)
        bundle = cls(DenoiserConfig(**meta["denoiser"]), SegmenterConfig(**meta["segmenter"]), precision=precision)
        prefix = "denoiser."
        bundle.denoiser.load_state_dict({k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)})
        prefix = "segmenter."
        bundle.segmenter.load_state_dict({k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)})
        return bundle


def denoiser_forward(bundle: ModelBundle, x_t: torch.Tensor, t: torch.Tensor | int) -> torch.Tensor:
    return bundle.denoiser(x_t, torch.as_tensor(t))


def segmenter_forward(bundle: ModelBundle, x0: torch.Tensor, x0_hat: torch.Tensor) -> torch.Tensor:
    return bundle.segmenter(x0, x0_hat)
