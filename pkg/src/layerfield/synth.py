"""Synthetic multi-human scenes with a closed-form reference renderer.

Each human is a set of capsules hung on the posed skeleton of the body model:
a dense core and a thin low-density shell per bone, coloured by body part.
Density and colour are constant inside every capsule, so along any ray the
radiance is piecewise constant and the volume rendering integral has an exact
solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .bodymodel import BodyParams, BodyTemplate, keypoints2d, make_template, posed_joints
from .camera import Camera
from .layeredrays import image_pixels, make_rays

CORE_DENSITY = 40.0
SHELL_DENSITY = 6.0
SHELL_SCALE = 1.3
POSE_NOISE = 0.05
TRANSLATION_NOISE = 0.02


@dataclass
class SceneFrame:
    frame_id: str
    cameras: list[Camera]
    images: torch.Tensor                 # (B, H, W, 3)
    params0: list[BodyParams]
    kpts_uv: torch.Tensor                # (N, B, J, 2)
    kpts_conf: torch.Tensor              # (N, B, J)
    query_cameras: list[Camera] = field(default_factory=list)
    query_images: torch.Tensor | None = None
    query_split: list[str] = field(default_factory=list)
    params_gt: list[BodyParams] | None = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def n_humans(self) -> int:
        return len(self.params0)

    @property
    def image_hw(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:3])

    def split_indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.query_split) if s == split]

    def with_views(self, n: int) -> "SceneFrame":
        return SceneFrame(self.frame_id, self.cameras[:n], self.images[:n], self.params0, self.kpts_uv[:, :n],
                          self.kpts_conf[:, :n], self.query_cameras, self.query_images, self.query_split,
                          self.params_gt)

    def to(self, dtype) -> "SceneFrame":
        return SceneFrame(
            self.frame_id, [c.to(dtype) for c in self.cameras], self.images.to(dtype),
            [p.to(dtype) for p in self.params0], self.kpts_uv.to(dtype), self.kpts_conf.to(dtype),
            [c.to(dtype) for c in self.query_cameras],
            None if self.query_images is None else self.query_images.to(dtype), list(self.query_split),
            None if self.params_gt is None else [p.to(dtype) for p in self.params_gt],
        )


# ---------------------------------------------------------------------------
# closed-form integration of piecewise-constant media


def ray_capsule(o: np.ndarray, d: np.ndarray, a: np.ndarray, b: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit depths of rays (R, 3) through one capsule; NaN where missed."""
    ba = b - a
    oa = o - a
    baba = ba @ ba
    bard = d @ ba
    baoa = oa @ ba
    rdoa = (d * oa).sum(1)
    oaoa = (oa * oa).sum(1)
    enters, exits = [], []

    qa = baba - bard**2
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa**2 - r * r * baba
    h = qb**2 - qa * qc
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = (h >= 0) & (qa > 1e-12)
        sq = np.sqrt(np.where(ok, h, 0.0))
        t1 = (-qb - sq) / np.where(ok, qa, 1.0)
        t2 = (-qb + sq) / np.where(ok, qa, 1.0)
        safe = np.where(np.abs(bard) > 1e-12, bard, 1.0)
        y0 = (0.0 - baoa) / safe
        y1 = (baba - baoa) / safe
        lo_y = np.where(np.abs(bard) > 1e-12, np.minimum(y0, y1), np.where((baoa >= 0) & (baoa <= baba), -np.inf, np.inf))
        hi_y = np.where(np.abs(bard) > 1e-12, np.maximum(y0, y1), np.where((baoa >= 0) & (baoa <= baba), np.inf, -np.inf))
        c_in = np.maximum(t1, lo_y)
        c_out = np.minimum(t2, hi_y)
        cyl = ok & (c_out > c_in)
    enters.append(np.where(cyl, c_in, np.inf))
    exits.append(np.where(cyl, c_out, -np.inf))

    for centre in (a, b):
        oc = o - centre
        sb = (oc * d).sum(1)
        sc = (oc * oc).sum(1) - r * r
        disc = sb**2 - sc
        hit = disc >= 0
        s = np.sqrt(np.where(hit, disc, 0.0))
        enters.append(np.where(hit, -sb - s, np.inf))
        exits.append(np.where(hit, -sb + s, -np.inf))

    t_in = np.minimum.reduce(enters)
    t_out = np.maximum.reduce(exits)
    t_in = np.maximum(t_in, 0.0)
    hit = t_out > t_in
    return np.where(hit, t_in, np.nan), np.where(hit, t_out, np.nan)


def integrate_piecewise(enter: np.ndarray, exit_: np.ndarray, sigma: np.ndarray, color: np.ndarray,
                        background=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Exact volume rendering of R rays through K overlapping constant-density intervals.

    enter/exit: (R, K) with NaN for absent intervals; sigma: (K,) or (R, K);
    color: (K, 3) or (R, K, 3). Where intervals overlap, densities add and the
    emitted colour is their density-weighted mean.
    """
    R, K = enter.shape
    sigma = np.broadcast_to(sigma, (R, K))
    color = np.broadcast_to(color, (R, K, 3))
    present = ~np.isnan(enter)
    bounds = np.sort(np.concatenate([np.where(present, enter, np.inf), np.where(present, exit_, np.inf)], 1), 1)
    t0, t1 = bounds[:, :-1], bounds[:, 1:]
    finite = np.isfinite(t1) & (t1 > t0)
    mid = np.where(finite, 0.5 * (t0 + t1), np.nan)
    with np.errstate(invalid="ignore"):
        active = present[:, None, :] & (enter[:, None, :] <= mid[..., None]) & (mid[..., None] <= exit_[:, None, :])
    s_act = np.where(active, sigma[:, None, :], 0.0)
    s_tot = s_act.sum(-1)
    emitted = (s_act[..., None] * color[:, None, :, :]).sum(2) / np.maximum(s_tot, 1e-300)[..., None]
    with np.errstate(invalid="ignore"):
        od = np.where(finite, s_tot * (t1 - t0), 0.0)
    cum = np.cumsum(od, 1)
    trans = np.exp(-(cum - od))
    w = trans * (1 - np.exp(-od))
    rgb = (w[..., None] * emitted).sum(1)
    t_final = np.exp(-cum[:, -1]) if cum.shape[1] else np.ones(R)
    rgb = rgb + t_final[:, None] * np.asarray(background)[None]
    return rgb, 1 - t_final


# ---------------------------------------------------------------------------
# scene generation


@dataclass
class SyntheticHuman:
    params: BodyParams
    part_colors: np.ndarray  # (3, 3)


@dataclass
class SyntheticScene:
    template: BodyTemplate
    humans: list[SyntheticHuman]
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def capsules(self, humans: list[int] | None = None):
        """Arrays (a, b, radius, sigma, color) over core and shell capsules."""
        t = self.template
        A, B, Rr, S, C = [], [], [], [], []
        for h in humans if humans is not None else range(len(self.humans)):
            hum = self.humans[h]
            joints = posed_joints(t, hum.params).detach().numpy()
            beta = hum.params.shape.detach().numpy()
            for c in range(1, t.n_joints):
                p = t.parents[c]
                r = t.bone_radii[c] * (1 + 0.03 * beta[0]) + 0.01 * beta[1]
                col = hum.part_colors[t.bone_part[c]]
                for radius, sig in ((r, CORE_DENSITY), (SHELL_SCALE * r, SHELL_DENSITY)):
                    A.append(joints[p])
                    B.append(joints[c])
                    Rr.append(radius)
                    S.append(sig)
                    C.append(col)
        return np.array(A), np.array(B), np.array(Rr), np.array(S), np.array(C)

    def render_rays(self, origins: np.ndarray, dirs: np.ndarray, humans: list[int] | None = None, chunk: int = 512):
        A, B, Rr, S, C = self.capsules(humans)
        rgbs, ops = [], []
        for s in range(0, len(origins), chunk):
            o, d = origins[s : s + chunk], dirs[s : s + chunk]
            ent = np.empty((len(o), len(A)))
            ext = np.empty((len(o), len(A)))
            for k in range(len(A)):
                ent[:, k], ext[:, k] = ray_capsule(o, d, A[k], B[k], Rr[k])
            rgb = np.tile(np.asarray(self.background, dtype=np.float64), (len(o), 1))
            op = np.zeros(len(o))
            hit = ~np.isnan(ent).all(1)
            if hit.any():
                rgb[hit], op[hit] = integrate_piecewise(ent[hit], ext[hit], S, C, self.background)
            rgbs.append(rgb)
            ops.append(op)
        return np.concatenate(rgbs), np.concatenate(ops)

    def render(self, camera: Camera, humans: list[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        rays = make_rays(camera.to(torch.float64), image_pixels(camera.width, camera.height))
        rgb, op = self.render_rays(rays.origins.numpy(), rays.directions.numpy(), humans)
        return rgb.reshape(camera.height, camera.width, 3), op.reshape(camera.height, camera.width)


def random_pose(rng: np.random.Generator, n_joints: int = 16) -> np.ndarray:
    pose = rng.normal(0.0, 0.12, size=(n_joints, 3))
    pose[0] = [0.0, 0.0, rng.uniform(-math.pi, math.pi)]
    lower = rng.uniform(0.7, 1.3, size=2)
    pose[4] += [0.0, lower[0], 0.0]
    pose[7] += [0.0, -lower[1], 0.0]
    pose[5] += [0.0, 0.0, rng.uniform(-0.6, 0.2)]
    pose[8] += [0.0, 0.0, rng.uniform(-0.2, 0.6)]
    pose[11] += [rng.uniform(0.0, 0.4), 0.0, 0.0]
    pose[14] += [rng.uniform(0.0, 0.4), 0.0, 0.0]
    return pose


def perturb(params: BodyParams, rng: np.random.Generator, pose_noise=POSE_NOISE, trans_noise=TRANSLATION_NOISE) -> BodyParams:
    dtype = params.pose.dtype
    return BodyParams(
        params.pose + torch.tensor(rng.normal(0, pose_noise, params.pose.shape), dtype=dtype),
        params.shape.clone(),
        params.translation + torch.tensor(rng.normal(0, trans_noise, 3), dtype=dtype),
    )


def ring_cameras(n: int, size: int, radius: float = 3.8, height: float = 1.1, phase: float = 0.0,
                 target=(0.0, 0.0, 0.9)) -> list[Camera]:
    focal = 100.0 * size / 64
    cams = []
    for k in range(n):
        ang = phase + 2 * math.pi * k / n
        eye = (radius * math.cos(ang), radius * math.sin(ang), height)
        cams.append(Camera.look_at(eye, target, (0, 0, 1), focal, size, size))
    return cams


def make_humans(rng: np.random.Generator, template: BodyTemplate, n_humans: int) -> list[SyntheticHuman]:
    humans = []
    spacing = 0.9
    for h in range(n_humans):
        x = (h - (n_humans - 1) / 2) * spacing + rng.uniform(-0.08, 0.08)
        y = rng.uniform(-0.15, 0.15)
        params = BodyParams(
            torch.tensor(random_pose(rng, template.n_joints)),
            torch.tensor(rng.normal(0, 0.5, template.n_shape)),
            torch.tensor([x, y, 0.0]),
        )
        colors = rng.uniform(0.1, 0.95, size=(3, 3))
        humans.append(SyntheticHuman(params, colors))
    return humans


def synth_scene(seed: int = 0, n_humans: int = 2, n_views: int = 3, size: int = 64, n_ring: int = 12,
                test_views: tuple[int, ...] = (2,), perturbation: bool = True,
                template: BodyTemplate | None = None) -> tuple[SceneFrame, SyntheticScene]:
    """Build one frame: input views, ring query views, oracle images and keypoints.

    Cameras sit on a ring of ``n_ring`` evenly spaced positions; inputs are
    ``n_views`` of them spread evenly, the remaining ring cameras become query
    views (indices in ``test_views`` are held out as the test split).
    """
    if n_humans < 1 or n_views < 1:
        raise ValueError("need at least one human and one view")
    rng = np.random.default_rng(seed)
    template = template or make_template()
    humans = make_humans(rng, template, n_humans)
    scene = SyntheticScene(template, humans)
    phase = rng.uniform(0, 2 * math.pi)
    ring = ring_cameras(n_ring, size, phase=phase)
    input_idx = [round(k * n_ring / n_views) % n_ring for k in range(n_views)]
    input_cams = [ring[i] for i in input_idx]
    images = torch.tensor(np.stack([scene.render(c)[0] for c in input_cams]))

    J = template.n_joints
    uv = torch.zeros(n_humans, n_views, J, 2, dtype=torch.float64)
    conf = torch.zeros(n_humans, n_views, J, dtype=torch.float64)
    for h, hum in enumerate(humans):
        for b, cam in enumerate(input_cams):
            kp = keypoints2d(template, hum.params, cam)
            inside = (kp.uv[:, 0] >= -0.5) & (kp.uv[:, 0] <= size - 0.5) & (kp.uv[:, 1] >= -0.5) & (kp.uv[:, 1] <= size - 0.5)
            uv[h, b] = kp.uv.detach()
            conf[h, b] = kp.confidence * inside.to(torch.float64)

    noise_rng = np.random.default_rng([seed, 1])
    params0 = [perturb(h.params, noise_rng) if perturbation else
               BodyParams(h.params.pose.clone(), h.params.shape.clone(), h.params.translation.clone()) for h in humans]

    q_idx = [i for i in range(n_ring) if i not in input_idx]
    q_cams = [ring[i] for i in input_idx] + [ring[i] for i in q_idx]
    q_split = ["train"] * n_views + ["test" if i in test_views else "train" for i in q_idx]
    q_images = torch.cat([images, torch.tensor(np.stack([scene.render(ring[i])[0] for i in q_idx]))]) if q_idx else images
    frame = SceneFrame(f"s{seed:04d}", input_cams, images, params0, uv, conf, q_cams, q_images, q_split,
                       [h.params for h in humans])
    return frame, scene
