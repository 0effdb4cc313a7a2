"""Iterative human-image alignment.

Each step projects the current body vertices into the fused feature planes of
every view, diffuses those vertex features into a per-human volume, reads the
volume back at a fixed subset of vertices to form one compact vector per view,
correlates the views with self-attention, averages them and regresses an
additive correction to the body parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .bodymodel import BodyParams, BodyTemplate, downsample, skin
from .camera import BEHIND_EPS, Camera, project
from .diffmath import MLP, Tensor, softmax
from .imagefeat import pixel_to_plane, sample_bilinear
from .voxeldiffuse import DiffusedVolume, DiffusionNet, grid_spec_for, query, scatter


class AttentionBlock(nn.Module):
    """softmax(query(x_q) key(x_kv)^T / sqrt(d_k)) val1(x_kv) + val2(x_q).

    Inputs carry the view axis second to last, so any leading batch dims are
    treated independently. Self-attention passes the same tensor twice.
    """

    def __init__(self, d_q: int, d_kv: int, d_k: int, d_out: int):
        super().__init__()
        self.query = nn.Linear(d_q, d_k)
        self.key = nn.Linear(d_kv, d_k)
        self.val1 = nn.Linear(d_kv, d_out)
        self.val2 = nn.Linear(d_q, d_out)
        self.d_k = d_k

    def weights(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        # broadcast-and-sum beats batched matmul for the handful of views involved
        q = self.query(x_q)[..., :, None, :]
        k = self.key(x_kv)[..., None, :, :]
        return softmax((q * k).sum(-1) / math.sqrt(self.d_k), axis=-1)

    def forward(self, x_q: Tensor, x_kv: Tensor | None = None) -> Tensor:
        x_kv = x_q if x_kv is None else x_kv
        att = self.weights(x_q, x_kv)
        mixed = (att[..., None] * self.val1(x_kv)[..., None, :, :]).sum(-2)
        return mixed + self.val2(x_q)


def self_attend_views(feats: Tensor, block: AttentionBlock) -> Tensor:
    """(B, C2) per-view features -> (B, C2) view-aware features."""
    if feats.shape[-2] < 1:
        raise ValueError("need at least one view")
    return block(feats)


def embed_vertices(vertices: Tensor, planes: Tensor, cameras: list[Camera], image_hw: tuple[int, int]) -> Tensor:
    """Sample (B, C, h, w) planes at each vertex's projection -> (B, V, C).

    Vertices behind a camera get zero features in that view.
    """
    out = []
    plane_hw = tuple(planes.shape[-2:])
    for b, cam in enumerate(cameras):
        uv, depth = project(vertices, cam)
        uv = pixel_to_plane(uv, image_hw, plane_hw)
        f = sample_bilinear(planes[b], uv[:, 0], uv[:, 1])
        out.append(f * (depth > BEHIND_EPS).to(f.dtype)[:, None])
    return torch.stack(out)


class CompactReducer(nn.Module):
    """Per-vertex linear reduction followed by flatten + projection to C2."""

    def __init__(self, c_in: int, c_reduce: int, n_query: int, c_out: int):
        super().__init__()
        self.reduce = nn.Linear(c_in, c_reduce)
        self.project = nn.Linear(c_reduce * n_query, c_out)

    def forward(self, queried: Tensor) -> Tensor:
        h = torch.relu(self.reduce(queried))
        return self.project(h.flatten(start_dim=-2))


def diffuse_vertices(vertices, vertex_feats, diffusion, resolution, padding) -> DiffusedVolume:
    spec = grid_spec_for(vertices, resolution, padding)
    return scatter(vertices, vertex_feats, spec, diffusion)


def compact_feature(volume: DiffusedVolume, vertices: Tensor, template: BodyTemplate, reducer: CompactReducer,
                    target: int | None = None) -> Tensor:
    """Query the diffused volume at the downsampled vertices and reduce to (B, C2)."""
    queried = query(volume, downsample(vertices, template, target))
    return reducer(queried)


def correct_params(feats: Tensor, params: BodyParams, mlp: nn.Module) -> BodyParams:
    """Average view-aware features, regress an offset and add it to the parameters."""
    fused = feats.mean(dim=0)
    theta = params.flat()
    delta = mlp(torch.cat([fused, theta]))
    if not bool(torch.isfinite(delta).all()):
        raise FloatingPointError("alignment head produced a non-finite parameter offset")
    return BodyParams.from_flat(theta + delta, params.pose.shape[0], params.shape.shape[0])


class OffsetHead(nn.Module):
    """ReLU MLP plus a linear bypass; both output layers start at zero.

    The bypass keeps a gradient path that cannot be cut off by inactive ReLU
    units, which matters because every training step sees a fresh offset.
    """

    def __init__(self, d_in: int, hidden: int, d_out: int, depth: int = 3):
        super().__init__()
        self.mlp = MLP(d_in, hidden, d_out, depth)
        self.bypass = nn.Linear(d_in, d_out)

    @property
    def layers(self) -> nn.ModuleList:
        return self.mlp.layers

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(x) + self.bypass(x)

    def zero_last_(self) -> "OffsetHead":
        self.mlp.zero_last_()
        with torch.no_grad():
            self.bypass.weight.zero_()
            self.bypass.bias.zero_()
        return self


class AlignStep(nn.Module):
    def __init__(self, c_in: int, c_reduce: int, n_query: int, c2: int, d_k: int, n_params: int, hidden: int):
        super().__init__()
        self.reducer = CompactReducer(c_in, c_reduce, n_query, c2)
        self.attention = AttentionBlock(c2, c2, d_k, c2)
        self.head = OffsetHead(c2 + n_params, hidden, n_params, depth=3)


@dataclass
class AlignResult:
    params: list[BodyParams]            # Theta^L per human
    vertices: list[Tensor]              # s^L per human
    volumes: list[DiffusedVolume]       # d^L per human, batched over views
    history: list[list[BodyParams]]     # Theta^0..Theta^L per human


class AlignmentModule(nn.Module):
    def __init__(self, template: BodyTemplate, diffuse_channels: int, steps: int = 2,
                 c_reduce: int = 8, c2: int = 64, d_k: int = 16, hidden: int = 128,
                 downsample_target: int | None = None):
        super().__init__()
        self.template = template
        self.target = downsample_target or template.default_downsample_target()
        n_params = template.n_joints * 3 + template.n_shape + 3
        self.steps = nn.ModuleList(
            AlignStep(diffuse_channels, c_reduce, self.target, c2, d_k, n_params, hidden) for _ in range(steps)
        )
        for step in self.steps:
            step.head.zero_last_()

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def step(self, l: int, params: BodyParams, planes: Tensor, cameras, image_hw, diffusion,
             resolution: int, padding: float) -> BodyParams:
        mod = self.steps[l]
        verts = skin(self.template, params)
        vfeat = embed_vertices(verts, planes, cameras, image_hw)
        volume = diffuse_vertices(verts, vfeat, diffusion, resolution, padding)
        compact = compact_feature(volume, verts, self.template, mod.reducer, self.target)
        attended = self_attend_views(compact, mod.attention)
        return correct_params(attended, params, mod.head)


def align(module: AlignmentModule | None, params0: list[BodyParams], fused_planes: dict[int, Tensor],
          cameras: list[Camera], image_hw: tuple[int, int], diffusion: DiffusionNet, template: BodyTemplate,
          n_steps: int, resolution: int = 32, padding: float = 0.05, final_level: int | None = None) -> AlignResult:
    """Run ``n_steps`` corrections; step l reads fused planes of level l.

    ``n_steps = 0`` keeps the input parameters. The final vertices are embedded
    into the planes of ``final_level`` (default: the last step's level) and
    diffused to provide the per-view human volumes.
    """
    levels = sorted(fused_planes)
    if n_steps > 0 and (module is None or n_steps > module.n_steps):
        raise ValueError("not enough alignment steps in the module")
    if n_steps > levels[-1]:
        raise ValueError(f"{n_steps} alignment steps need {n_steps + 1} pyramid levels")
    out_params, out_verts, out_vols, history = [], [], [], []
    if final_level is None:
        final_level = max(n_steps, levels[0])
    for p0 in params0:
        p = p0
        hist = [p0]
        for l in range(1, n_steps + 1):
            p = module.step(l - 1, p, fused_planes[l], cameras, image_hw, diffusion, resolution, padding)
            hist.append(p)
        verts = skin(template, p)
        vfeat = embed_vertices(verts, fused_planes[final_level], cameras, image_hw)
        out_vols.append(diffuse_vertices(verts, vfeat, diffusion, resolution, padding))
        out_params.append(p)
        out_verts.append(verts)
        history.append(hist)
    return AlignResult(out_params, out_verts, out_vols, history)
