"""Per-view image encoder, level fusion and sub-pixel feature lookup."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .camera import Camera, project  # noqa: F401  (re-exported)
from .diffmath import Tensor


@dataclass
class FeaturePyramid:
    """Levels ordered low -> high resolution; each level is (B, C_l, H_l, W_l)."""

    levels: list[Tensor]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def view(self, b: int) -> list[Tensor]:
        return [lvl[b] for lvl in self.levels]


class Encoder(nn.Module):
    """Small convolutional backbone; every block's output is one pyramid tap."""

    def __init__(self, channels=(16, 32, 64), strides=(1, 2, 2)):
        super().__init__()
        blocks = []
        c_in = 3
        for c, s in zip(channels, strides):
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c, 3, stride=s, padding=1), nn.ReLU(),
                nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            ))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.channels = tuple(channels)
        self.strides = tuple(strides)

    def level_channels(self) -> list[int]:
        return list(reversed(self.channels))

    def forward(self, images: Tensor) -> FeaturePyramid:
        x = images
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return FeaturePyramid(taps[::-1])


def encode(encoder: Encoder, images: Tensor) -> FeaturePyramid:
    """images: (H, W, 3) or (B, H, W, 3) with values in [0, 1]."""
    if images.dim() == 3:
        images = images[None]
    if images.dim() != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected RGB images (B, H, W, 3), got {tuple(images.shape)}")
    return encoder(images.permute(0, 3, 1, 2))


class LevelFuser(nn.Module):
    """Upsample level l-1 with a learned deconvolution, concatenate level l, mix to C1."""

    def __init__(self, c_low: int, c_high: int, c_out: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(c_low, c_low, kernel_size=2, stride=2)
        self.mix = nn.Conv2d(c_low + c_high, c_out, kernel_size=1)

    def concat(self, low: Tensor, high: Tensor) -> Tensor:
        up = self.up(low)
        H, W = high.shape[-2:]
        if up.shape[-2:] != (H, W):
            up = nn.functional.pad(up, (0, max(0, W - up.shape[-1]), 0, max(0, H - up.shape[-2])))[..., :H, :W]
        return torch.cat([up, high], dim=1)

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        return self.mix(self.concat(low, high))


class PyramidFuser(nn.Module):
    def __init__(self, level_channels: list[int], c_out: int):
        super().__init__()
        self.fusers = nn.ModuleList(
            LevelFuser(level_channels[l - 1], level_channels[l], c_out) for l in range(1, len(level_channels))
        )

    def forward(self, pyramid: FeaturePyramid, level: int) -> Tensor:
        return fuse_levels(self, pyramid, level)


def fuse_levels(fuser: PyramidFuser, pyramid: FeaturePyramid, level: int) -> Tensor:
    """Fused plane for ``level`` (1 <= level <= T-1), shape (B, C1, H_l, W_l)."""
    if not 1 <= level <= pyramid.n_levels - 1:
        raise ValueError(f"fuse_levels needs 1 <= level <= {pyramid.n_levels - 1}, got {level}")
    return fuser.fusers[level - 1](pyramid.levels[level - 1], pyramid.levels[level])


def pixel_to_plane(uv: Tensor, image_hw: tuple[int, int], plane_hw: tuple[int, int]) -> Tensor:
    """Map full-resolution pixel coordinates onto a (possibly coarser) feature plane."""
    sx = image_hw[1] / plane_hw[1]
    sy = image_hw[0] / plane_hw[0]
    u = (uv[..., 0] + 0.5) / sx - 0.5
    v = (uv[..., 1] + 0.5) / sy - 0.5
    return torch.stack([u, v], dim=-1)


def sample_bilinear(plane: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Bilinear lookup on a (C, H, W) plane at pixel coords; returns (M, C).

    Texel centres are at integer coordinates; lookups outside the plane are
    clamped to the border texels.
    """
    C, H, W = plane.shape
    u = u.clamp(0, W - 1)
    v = v.clamp(0, H - 1)
    u0 = torch.floor(u).clamp(max=max(W - 2, 0)).detach()
    v0 = torch.floor(v).clamp(max=max(H - 2, 0)).detach()
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=W - 1)
    v1 = (v0 + 1).clamp(max=H - 1)
    flat = plane.reshape(C, H * W).T
    f00 = flat[v0 * W + u0]
    f01 = flat[v0 * W + u1]
    f10 = flat[v1 * W + u0]
    f11 = flat[v1 * W + u1]
    top = f00 + (f01 - f00) * fu
    bot = f10 + (f11 - f10) * fu
    return top + (bot - top) * fv


def sample_views(planes: Tensor, uv: Tensor) -> Tensor:
    """Bilinear lookup of per-view points: planes (B, C, H, W), uv (B, M, 2) -> (B, M, C)."""
    return torch.stack([sample_bilinear(planes[b], uv[b, :, 0], uv[b, :, 1]) for b in range(planes.shape[0])])
