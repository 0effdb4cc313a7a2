"""Pinhole cameras: world -> camera -> pixel projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffmath import Tensor

BEHIND_EPS = 1e-6


@dataclass
class Camera:
    """x_cam = R x_world + t; pixel = K x_cam / z. Pixel centres sit on integer coordinates."""

    K: Tensor
    R: Tensor
    t: Tensor
    width: int
    height: int

    @property
    def center(self) -> Tensor:
        return -self.R.T @ self.t

    def to(self, dtype) -> "Camera":
        return Camera(self.K.to(dtype), self.R.to(dtype), self.t.to(dtype), self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "K": self.K.detach().cpu().numpy().tolist(),
            "R": self.R.detach().cpu().numpy().tolist(),
            "t": self.t.detach().cpu().numpy().tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict, dtype=torch.float64) -> "Camera":
        K = torch.tensor(np.asarray(d["K"], dtype=np.float64).reshape(3, 3), dtype=dtype)
        R = torch.tensor(np.asarray(d["R"], dtype=np.float64).reshape(3, 3), dtype=dtype)
        t = torch.tensor(np.asarray(d["t"], dtype=np.float64).reshape(3), dtype=dtype)
        return cls(K, R, t, int(d["width"]), int(d["height"]))

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int, dtype=torch.float64) -> "Camera":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        t = -R @ eye
        K = np.array([[focal, 0.0, (width - 1) / 2], [0.0, focal, (height - 1) / 2], [0.0, 0.0, 1.0]])
        return cls(torch.tensor(K, dtype=dtype), torch.tensor(R, dtype=dtype), torch.tensor(t, dtype=dtype), width, height)


def project(points: Tensor, camera: Camera) -> tuple[Tensor, Tensor]:
    """Project (..., 3) world points. Returns pixel coords (..., 2) and depth (...).

    Points with depth <= 1e-6 are behind the camera; their pixel coordinates are
    finite but meaningless and callers must mask them with ``depth > BEHIND_EPS``.
    """
    x_cam = points @ camera.R.T + camera.t
    depth = x_cam[..., 2]
    z = torch.where(depth > BEHIND_EPS, depth, torch.ones_like(depth))
    uv = x_cam[..., :2] / z[..., None]
    uv = uv @ camera.K[:2, :2].T + camera.K[:2, 2]
    return uv, depth
