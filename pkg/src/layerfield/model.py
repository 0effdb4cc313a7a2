"""The full network: encoder, alignment, layered sampling, fusion and radiance prediction."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .alignment import AlignmentModule, AlignResult, align
from .bodymodel import BodyParams, BodyTemplate, Keypoints2D, make_template, regress_joints
from .camera import BEHIND_EPS, Camera, project
from .config import RunConfig
from .diffmath import Tensor, uniform_fan_in_
from .fusion import FusionModule, RadiancePredictor, gather_features
from .imagefeat import Encoder, PyramidFuser, encode, fuse_levels
from .layeredrays import Rays, intersect, intersect_layers, layer_aabb, sample_points
from .render import composite
from .synth import SceneFrame
from .voxeldiffuse import DiffusionNet


@dataclass
class FrameContext:
    """Everything a frame contributes before any query ray is cast."""

    cameras: list[Camera]
    images: Tensor
    planes: Tensor                       # fused planes feeding point features, (B, C1, h, w)
    aligned: AlignResult
    boxes: list[tuple[Tensor, Tensor]]

    @property
    def params(self) -> list[BodyParams]:
        return self.aligned.params


class LayeredField(nn.Module):
    def __init__(self, cfg: RunConfig, template: BodyTemplate | None = None):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.torch_dtype
        self.template = (template or make_template()).to(dtype)
        self.encoder = Encoder(cfg.encoder_channels, cfg.encoder_strides)
        self.fuser = PyramidFuser(self.encoder.level_channels(), cfg.fused_channels)
        self.diffusion = DiffusionNet(cfg.fused_channels, cfg.diffuse_channels)
        self.alignment = AlignmentModule(
            self.template, cfg.diffuse_channels, cfg.align_steps, cfg.vertex_reduce_channels,
            cfg.compact_channels, cfg.align_key_dim, cfg.align_hidden, cfg.downsample_target,
        )
        self.fusion = FusionModule(cfg.fused_channels, cfg.diffuse_channels, cfg.fusion_channels,
                                   cfg.fusion_key_dim, cfg.fusion_mode)
        self.predictor = RadiancePredictor(
            cfg.fusion_channels, cfg.fused_channels, cfg.sigma_width, cfg.sigma_depth, cfg.color_width,
            cfg.color_depth, cfg.rgb_key_dim, cfg.view_freqs, cfg.rgb_freqs,
        )
        gen = torch.Generator().manual_seed(cfg.seed)
        uniform_fan_in_(self, gen)
        for step in self.alignment.steps:
            step.head.zero_last_()
        self.to(dtype)
        self.register_buffer("background", torch.tensor(cfg.background, dtype=dtype), persistent=False)

    @property
    def dtype(self):
        return self.cfg.torch_dtype

    # -- frame level --------------------------------------------------------

    def prepare(self, frame: SceneFrame, params0: list[BodyParams] | None = None) -> FrameContext:
        cfg = self.cfg
        images = frame.images.to(self.dtype)
        cameras = [c.to(self.dtype) for c in frame.cameras]
        params0 = [p.to(self.dtype) for p in (params0 or frame.params0)]
        pyramid = encode(self.encoder, images)
        planes = {l: fuse_levels(self.fuser, pyramid, l) for l in range(1, cfg.align_steps + 1)}
        n_steps = cfg.align_steps if cfg.use_alignment else 0
        aligned = align(
            self.alignment, params0, planes, cameras, frame.image_hw, self.diffusion, self.template, n_steps,
            cfg.grid_resolution, cfg.grid_padding, final_level=cfg.align_steps,
        )
        boxes = [layer_aabb(v, cfg.aabb_padding) for v in aligned.vertices]
        return FrameContext(cameras, images, planes[cfg.align_steps], aligned, boxes)

    def keypoints(self, ctx: FrameContext) -> list[list[Keypoints2D]]:
        out = []
        for verts in ctx.aligned.vertices:
            joints = regress_joints(self.template, verts)
            per_view = []
            for cam in ctx.cameras:
                uv, depth = project(joints, cam)
                per_view.append(Keypoints2D(uv, (depth > BEHIND_EPS).to(uv.dtype)))
            out.append(per_view)
        return out

    # -- point level --------------------------------------------------------

    def evaluate_points(self, ctx: FrameContext, points: Tensor, layer: Tensor, view_dirs: Tensor):
        pf = gather_features(points, layer, ctx.planes, ctx.aligned.volumes, ctx.cameras, ctx.images)
        ff = self.fusion(pf)
        return self.predictor(ff, pf, view_dirs)

    def _shade(self, ctx: FrameContext, rays: Rays, z: Tensor, layer: Tensor, delta: Tensor, valid: Tensor):
        R, S = z.shape
        ray_idx, slot = valid.nonzero(as_tuple=True)
        sigma = z.new_zeros(R, S)
        rgb = z.new_zeros(R, S, 3)
        if ray_idx.numel():
            pts = rays.origins[ray_idx] + z[ray_idx, slot][:, None] * rays.directions[ray_idx]
            s, c = self.evaluate_points(ctx, pts, layer[ray_idx, slot], rays.directions[ray_idx])
            sigma = sigma.index_put((ray_idx, slot), s)
            rgb = rgb.index_put((ray_idx, slot), c)
        return composite(z, sigma, rgb, delta, valid, self.background)

    def render_rays(self, ctx: FrameContext, rays: Rays, stratified: bool = False,
                    generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        segments = intersect_layers(rays, ctx.boxes)
        batch = sample_points(segments, self.cfg.samples_per_segment, stratified, generator)
        return self._shade(ctx, rays, batch.z, batch.layer, batch.delta, batch.valid)

    def render_rays_single_layer(self, ctx: FrameContext, rays: Rays, h: int = 0) -> tuple[Tensor, Tensor]:
        """Plain one-box volume rendering with midpoint samples (no merge, no padding)."""
        n = self.cfg.samples_per_segment
        z_near, z_far, hit = intersect(rays, *ctx.boxes[h])
        span = (z_far - z_near).clamp(min=0)
        bins = torch.arange(n, dtype=span.dtype)
        z = z_near[:, None] + (bins + 0.5) / n * span[:, None]
        delta = (span / n)[:, None].expand(-1, n)
        valid = hit[:, None].expand(-1, n)
        z = torch.where(valid, z, torch.full_like(z, float("inf")))
        layer = torch.full(z.shape, h, dtype=torch.long)
        return self._shade(ctx, rays, z, layer, delta, valid)

    def render_image(self, ctx: FrameContext, camera: Camera, chunk: int | None = None) -> Tensor:
        from .layeredrays import image_pixels, make_rays

        chunk = chunk or self.cfg.render_chunk
        rays = make_rays(camera.to(self.dtype), image_pixels(camera.width, camera.height, self.dtype))
        out = []
        for s in range(0, len(rays), chunk):
            out.append(self.render_rays(ctx, rays.subset(slice(s, s + chunk)))[0])
        return torch.cat(out).reshape(camera.height, camera.width, 3)

    # -- parameters ---------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.state_dict().items()}
