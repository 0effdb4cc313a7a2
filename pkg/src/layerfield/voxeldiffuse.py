"""Dense voxel volumes of diffused vertex features.

Vertex features are averaged into the voxels that contain them and smoothed by
a small learned 3D convolution stack; the result can be read back anywhere by
trilinear interpolation with zero support outside the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .diffmath import Tensor


@dataclass
class GridSpec:
    origin: Tensor      # (3,) min corner, metres
    voxel_size: Tensor  # scalar, metres
    dims: tuple[int, int, int]


@dataclass
class DiffusedVolume:
    origin: Tensor
    voxel_size: Tensor
    dims: tuple[int, int, int]
    features: Tensor    # (B, C, Dx, Dy, Dz)
    clamped: int = 0    # vertices that fell outside the grid during scatter

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.origin, self.voxel_size, self.dims)


def grid_spec_for(vertices: Tensor, resolution: int = 32, padding: float = 0.05) -> GridSpec:
    """Cubic voxels over the padded AABB; the longest side gets ``resolution`` voxels."""
    lo = vertices.min(dim=0).values - padding
    hi = vertices.max(dim=0).values + padding
    extent = hi - lo
    voxel = extent.max() / resolution
    ratio = (extent / voxel).detach()
    dims = tuple(int(min(resolution, max(1, math.ceil(float(e) - 1e-9)))) for e in ratio)
    return GridSpec(lo, voxel, dims)


class DiffusionNet(nn.Module):
    """Two 3x3x3 convolutions with a ReLU in between."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.out_channels = c_out

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(torch.relu(self.conv1(x)))


def voxel_indices(points: Tensor, spec: GridSpec) -> tuple[Tensor, int]:
    idx = torch.floor((points.detach() - spec.origin.detach()) / spec.voxel_size.detach()).long()
    hi = torch.tensor(spec.dims) - 1
    clamped = idx.clamp(min=torch.zeros(3, dtype=torch.long), max=hi)
    n_out = int((clamped != idx).any(dim=1).sum())
    return clamped, n_out


def scatter(vertices: Tensor, feats: Tensor, spec: GridSpec, smoother: nn.Module | None = None) -> DiffusedVolume:
    """Average (B, N, C) or (N, C) vertex features into voxels, then smooth."""
    if feats.dim() == 2:
        feats = feats[None]
    B, N, C = feats.shape
    Dx, Dy, Dz = spec.dims
    idx, n_out = voxel_indices(vertices, spec)
    flat = (idx[:, 0] * Dy + idx[:, 1]) * Dz + idx[:, 2]
    acc = feats.new_zeros(B, Dx * Dy * Dz, C).index_add(1, flat, feats)
    count = torch.zeros(Dx * Dy * Dz, dtype=feats.dtype).index_add_(0, flat, torch.ones(N, dtype=feats.dtype))
    grid = acc / count.clamp(min=1)[None, :, None]
    grid = grid.permute(0, 2, 1).reshape(B, C, Dx, Dy, Dz)
    if smoother is not None:
        grid = smoother(grid)
    return DiffusedVolume(spec.origin, spec.voxel_size, spec.dims, grid, n_out)


_CORNERS = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]


def query(volume: DiffusedVolume, points: Tensor) -> Tensor:
    """Trilinear read-back at (M, 3) points -> (B, M, C); zero outside the grid."""
    feats = volume.features
    B, C = feats.shape[:2]
    dims = torch.tensor(volume.dims)
    g = (points - volume.origin) / volume.voxel_size - 0.5
    i0 = torch.floor(g).detach()
    w1 = g - i0
    w0 = 1 - w1
    i0 = i0.long()
    flat_feats = feats.reshape(B, C, -1)
    out = feats.new_zeros(B, C, points.shape[0])
    Dy, Dz = volume.dims[1], volume.dims[2]
    for cx, cy, cz in _CORNERS:
        idx = i0 + torch.tensor([cx, cy, cz])
        valid = ((idx >= 0) & (idx < dims)).all(dim=1)
        idx = torch.minimum(idx.clamp(min=0), dims - 1)
        flat = (idx[:, 0] * Dy + idx[:, 1]) * Dz + idx[:, 2]
        wx = w1[:, 0] if cx else w0[:, 0]
        wy = w1[:, 1] if cy else w0[:, 1]
        wz = w1[:, 2] if cz else w0[:, 2]
        w = wx * wy * wz * valid.to(w1.dtype)
        out = out + flat_feats[:, :, flat] * w
    return out.permute(0, 2, 1)
