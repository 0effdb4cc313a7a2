"""Camera rays, per-human boxes, slab intersection and layered depth sampling."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .camera import Camera
from .diffmath import Tensor


@dataclass
class Rays:
    origins: Tensor     # (R, 3)
    directions: Tensor  # (R, 3), unit
    pixels: Tensor      # (R, 2)

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.pixels[idx])


@dataclass
class LayerSegments:
    """Per ray and layer: [z_near, z_far] and whether the ray hits that layer's box."""

    z_near: Tensor  # (R, H)
    z_far: Tensor   # (R, H)
    hit: Tensor     # (R, H) bool


@dataclass
class LayeredPointBatch:
    """Padded per-ray samples sorted by depth; invalid slots carry z = +inf."""

    z: Tensor       # (R, S)
    layer: Tensor   # (R, S) long
    delta: Tensor   # (R, S)
    valid: Tensor   # (R, S) bool

    def positions(self, rays: Rays) -> Tensor:
        z = torch.where(self.valid, self.z, torch.zeros_like(self.z))
        return rays.origins[:, None, :] + z[..., None] * rays.directions[:, None, :]


def make_rays(camera: Camera, pixels: Tensor) -> Rays:
    """One ray per (u, v) pixel coordinate; pixel centres are integer coordinates."""
    K = camera.K
    if abs(float(torch.linalg.det(K))) < 1e-12:
        raise ValueError("camera intrinsics are singular")
    homo = torch.cat([pixels.to(K.dtype), torch.ones_like(pixels[:, :1], dtype=K.dtype)], dim=1)
    d_cam = torch.linalg.solve(K, homo.T).T
    d = d_cam @ camera.R
    d = d / d.norm(dim=1, keepdim=True)
    origin = camera.center.expand_as(d)
    return Rays(origin, d, pixels)


def image_pixels(width: int, height: int, dtype=torch.float64) -> Tensor:
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij")
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=1)


def layer_aabb(vertices: Tensor, padding: float = 0.05) -> tuple[Tensor, Tensor]:
    if vertices.numel() == 0 or vertices.shape[0] == 0:
        raise ValueError("cannot bound an empty vertex set")
    return vertices.min(dim=0).values - padding, vertices.max(dim=0).values + padding


def intersect(rays: Rays, lo: Tensor, hi: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Slab test against one box, clipped to positive depths.

    Returns (z_near, z_far, hit) per ray. Rays parallel to a slab hit only if
    their origin lies between the slab planes.
    """
    o, d = rays.origins, rays.directions
    parallel = d.abs() < 1e-12
    safe_d = torch.where(parallel, torch.ones_like(d), d)
    t1 = (lo - o) / safe_d
    t2 = (hi - o) / safe_d
    inside = (o >= lo) & (o <= hi)
    big = torch.full_like(t1, float("inf"))
    tmin = torch.where(parallel, torch.where(inside, -big, big), torch.minimum(t1, t2))
    tmax = torch.where(parallel, torch.where(inside, big, -big), torch.maximum(t1, t2))
    z_near = tmin.max(dim=1).values.clamp(min=1e-6)
    z_far = tmax.min(dim=1).values
    hit = z_far > z_near
    return z_near, z_far, hit


def intersect_layers(rays: Rays, boxes: list[tuple[Tensor, Tensor]]) -> LayerSegments:
    near, far, hit = zip(*(intersect(rays, lo, hi) for lo, hi in boxes))
    return LayerSegments(torch.stack(near, 1), torch.stack(far, 1), torch.stack(hit, 1))


def sample_points(segments: LayerSegments, n: int, stratified: bool = False,
                  generator: torch.Generator | None = None) -> LayeredPointBatch:
    """``n`` depths per hit segment, merged across layers and sorted by depth.

    Eval mode uses bin midpoints, training mode a uniform jitter inside each bin.
    Every sample represents one bin, so delta = segment span / n. Ties in depth
    keep layer order (stable sort over layer-major slots).
    """
    R, H = segments.hit.shape
    span = (segments.z_far - segments.z_near).clamp(min=0)
    dtype = span.dtype
    bins = torch.arange(n, dtype=dtype)
    if stratified:
        jitter = torch.rand((R, H, n), generator=generator, dtype=dtype)
    else:
        jitter = torch.full((R, H, n), 0.5, dtype=dtype)
    z = segments.z_near[..., None] + (bins + jitter) / n * span[..., None]
    delta = (span / n)[..., None].expand(R, H, n)
    valid = segments.hit[..., None].expand(R, H, n)
    layer = torch.arange(H)[None, :, None].expand(R, H, n)
    z = torch.where(valid, z, torch.full_like(z, float("inf"))).reshape(R, H * n)
    order = torch.sort(z.detach(), dim=1, stable=True).indices
    z = torch.gather(z, 1, order)
    return LayeredPointBatch(
        z,
        torch.gather(layer.reshape(R, H * n), 1, order),
        torch.gather(delta.reshape(R, H * n), 1, order),
        torch.gather(valid.reshape(R, H * n), 1, order),
    )
