"""Point-wise feature assembly, attention-aware fusion and the radiance predictor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import AttentionBlock
from .camera import BEHIND_EPS, Camera, project
from .diffmath import MLP, Tensor, posenc, softmax
from .imagefeat import pixel_to_plane, sample_bilinear
from .voxeldiffuse import DiffusedVolume, query


@dataclass
class PointFeatures:
    image: Tensor      # (M, B, C1) image-aligned p
    anchored: Tensor   # (M, B, Cd) human-anchored g
    rgb: Tensor        # (M, B, 3) raw colours r
    dirs: Tensor       # (M, B, 3) unit camera->point directions d'

    def permute_views(self, perm) -> "PointFeatures":
        return PointFeatures(self.image[:, perm], self.anchored[:, perm], self.rgb[:, perm], self.dirs[:, perm])


@dataclass
class FusedFeature:
    view_aware: Tensor | None  # (M, B, F) after self-attention
    per_view: Tensor | None    # (M, B, F) after cross-attention
    fused: Tensor              # (M, F) view mean


def gather_features(points: Tensor, layer: Tensor, planes: Tensor, volumes: list[DiffusedVolume],
                    cameras: list[Camera], images: Tensor) -> PointFeatures:
    """points (M, 3) with owning layer ids (M,); planes (B, C1, h, w); images (B, H, W, 3)."""
    B = len(cameras)
    H, W = images.shape[1:3]
    plane_hw = tuple(planes.shape[-2:])
    img_feats, rgbs, dirs = [], [], []
    for b, cam in enumerate(cameras):
        uv, depth = project(points, cam)
        front = (depth > BEHIND_EPS).to(points.dtype)[:, None]
        puv = pixel_to_plane(uv, (H, W), plane_hw)
        img_feats.append(sample_bilinear(planes[b], puv[:, 0], puv[:, 1]) * front)
        rgbs.append(sample_bilinear(images[b].permute(2, 0, 1), uv[:, 0], uv[:, 1]) * front)
        d = points - cam.center
        dirs.append(d / d.norm(dim=1, keepdim=True).clamp(min=1e-12))
    c_d = volumes[0].features.shape[1]
    anchored = points.new_zeros(points.shape[0], B, c_d)
    for h, vol in enumerate(volumes):
        mask = layer == h
        if bool(mask.any()):
            idx = mask.nonzero(as_tuple=True)[0]
            anchored = anchored.index_put((idx,), query(vol, points[idx]).permute(1, 0, 2))
    return PointFeatures(torch.stack(img_feats, 1), anchored, torch.stack(rgbs, 1), torch.stack(dirs, 1))


class FusionModule(nn.Module):
    """Self-attention over anchored features, then cross-attention into image features.

    ``mode="average"`` replaces both attention stages with a projection of the
    view-mean of the concatenated features.
    """

    def __init__(self, c_image: int, c_anchor: int, c_out: int, d_k: int = 16, mode: str = "attention"):
        super().__init__()
        self.mode = mode
        if mode == "attention":
            self.self_att = AttentionBlock(c_anchor + 3, c_anchor + 3, d_k, c_out)
            self.cross_att = AttentionBlock(c_out, c_image, d_k, c_out)
        else:
            self.average = nn.Linear(c_anchor + c_image + 3, c_out)
        self.out_channels = c_out

    def forward(self, pf: PointFeatures) -> FusedFeature:
        return fuse(self, pf)


def fuse(module: FusionModule, pf: PointFeatures) -> FusedFeature:
    if module.mode == "average":
        x = torch.cat([pf.anchored, pf.image, pf.dirs], dim=-1).mean(dim=1)
        return FusedFeature(None, None, module.average(x))
    g_hat = module.self_att(torch.cat([pf.anchored, pf.dirs], dim=-1))
    g_tilde = module.cross_att(g_hat, pf.image)
    return FusedFeature(g_hat, g_tilde, g_tilde.mean(dim=1))


class RadiancePredictor(nn.Module):
    def __init__(self, c_fused: int, c_image: int, sigma_width=128, sigma_depth=4, color_width=64, color_depth=2,
                 rgb_key_dim=16, view_freqs=4, rgb_freqs=2):
        super().__init__()
        self.view_freqs = view_freqs
        self.rgb_freqs = rgb_freqs
        self.sigma_mlp = MLP(c_fused, sigma_width, 1, sigma_depth)
        view_dim = 6 * view_freqs + 3
        rgb_dim = 6 * rgb_freqs + 3
        self.color1 = MLP(c_fused + view_dim + c_image, color_width, color_width, color_depth)
        self.rgb_query = nn.Linear(3, rgb_key_dim)
        self.rgb_key = nn.Linear(3, rgb_key_dim)
        self.rgb_val = nn.Linear(color_width + rgb_dim, color_width)
        self.color2 = MLP(color_width, color_width, 3, color_depth)
        self.rgb_key_dim = rgb_key_dim

    def forward(self, ff: FusedFeature, pf: PointFeatures, q: Tensor) -> tuple[Tensor, Tensor]:
        return density(self, ff.fused), color(self, ff, pf, q)


def density(pred: RadiancePredictor, fused: Tensor) -> Tensor:
    return F.softplus(pred.sigma_mlp(fused)[..., 0])


def rgb_attention(pred: RadiancePredictor, q: Tensor, dirs: Tensor) -> Tensor:
    """(M, 3) query directions against (M, B, 3) input directions -> (M, B) weights."""
    scores = (pred.rgb_key(dirs) @ pred.rgb_query(q)[..., None])[..., 0] / math.sqrt(pred.rgb_key_dim)
    return softmax(scores, axis=-1)


def color(pred: RadiancePredictor, ff: FusedFeature, pf: PointFeatures, q: Tensor) -> Tensor:
    B = pf.rgb.shape[1]
    c_tilde = pred.color1(torch.cat([ff.fused, posenc(q, pred.view_freqs), pf.image.mean(dim=1)], dim=-1))
    c_hat = torch.cat([c_tilde[:, None, :].expand(-1, B, -1), posenc(pf.rgb, pred.rgb_freqs)], dim=-1)
    att = rgb_attention(pred, q, pf.dirs)
    mixed = (att[:, None, :] @ pred.rgb_val(c_hat))[:, 0, :]
    return torch.sigmoid(pred.color2(mixed))
