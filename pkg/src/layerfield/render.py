"""Layered compositing and the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .bodymodel import BodyParams, Keypoints2D
from .diffmath import Tensor


class ContractError(ValueError):
    """Input violates an ordering/shape contract of the renderer."""


@dataclass
class LossWeights:
    ph: float = 1.0
    kpts: float = 0.01
    reg: float = 0.001

    def __post_init__(self):
        if min(self.ph, self.kpts, self.reg) < 0:
            raise ValueError("loss weights must be nonnegative")


def composite(z: Tensor, sigma: Tensor, rgb: Tensor, delta: Tensor, valid: Tensor,
              background: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Front-to-back alpha compositing of depth-sorted samples.

    z, sigma, delta, valid: (R, S); rgb: (R, S, 3). Invalid slots contribute
    nothing. Returns pixel colours (R, 3) and opacity (R,).
    """
    zv = torch.where(valid, z, torch.full_like(z, float("inf"))).detach()
    if z.shape[1] > 1 and bool((zv[:, 1:] < zv[:, :-1]).any()):
        raise ContractError("samples must be sorted by depth along each ray")
    od = torch.where(valid, sigma * delta, torch.zeros_like(sigma))
    cum = torch.cumsum(od, dim=1)
    trans = torch.exp(-(cum - od))
    alpha = 1.0 - torch.exp(-od)
    w = trans * alpha
    color = (w[..., None] * rgb).sum(dim=1)
    if z.shape[1]:
        t_final = torch.exp(-cum[:, -1])
    else:
        t_final = z.new_ones(z.shape[0])
    if background is not None:
        color = color + t_final[:, None] * background
    return color, 1.0 - t_final


def _safe_norm(x: Tensor, dim: int = -1) -> Tensor:
    """Euclidean norm with a zero (not NaN) gradient at the origin."""
    sq = (x * x).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def photometric_loss(pred: Tensor, gt: Tensor) -> Tensor:
    return ((pred - gt) ** 2).mean()


def keypoint_loss(pred: list[list[Keypoints2D]], gt_uv: Tensor, gt_conf: Tensor) -> Tensor:
    """Confidence-weighted joint distances, summed over joints, averaged over humans and views.

    pred[h][b] holds predicted keypoints; gt_uv (N, B, J, 2), gt_conf (N, B, J).
    Joints behind the predicting camera (zero predicted confidence) are skipped.
    """
    terms = []
    for h, per_view in enumerate(pred):
        for b, kp in enumerate(per_view):
            w = gt_conf[h, b] * kp.confidence
            terms.append((w * _safe_norm(kp.uv - gt_uv[h, b])).sum())
    return torch.stack(terms).mean()


def regularizer(params: list[BodyParams]) -> Tensor:
    return torch.stack([_safe_norm(p.flat()) for p in params]).mean()


def total_loss(pred_rgb, gt_rgb, pred_kpts, gt_uv, gt_conf, params, w: LossWeights) -> tuple[Tensor, dict]:
    terms = {
        "photometric": photometric_loss(pred_rgb, gt_rgb) if pred_rgb is not None else gt_uv.new_zeros(()),
        "keypoints": keypoint_loss(pred_kpts, gt_uv, gt_conf),
        "regularizer": regularizer(params),
    }
    loss = w.ph * terms["photometric"] + w.kpts * terms["keypoints"] + w.reg * terms["regularizer"]
    return loss, {k: float(v.detach()) for k, v in terms.items()}
