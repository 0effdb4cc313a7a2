"""Articulated capsule-limb body model with linear blend skinning.

A procedurally generated humanoid that follows the usual parametric-body recipe:
shape blendshapes on a rest mesh, joints regressed from the shaped mesh, forward
kinematics over a joint tree, linear blend skinning and a global translation.
Counts are configurable so an external template can be loaded from JSON instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import BEHIND_EPS, Camera, project
from .diffmath import Tensor

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)
REST_JOINTS = np.array([
    [0.0, 0.0, 0.95], [0.0, 0.0, 1.15], [0.0, 0.0, 1.45], [0.0, 0.0, 1.66],
    [0.18, 0.0, 1.42], [0.45, 0.0, 1.42], [0.70, 0.0, 1.42],
    [-0.18, 0.0, 1.42], [-0.45, 0.0, 1.42], [-0.70, 0.0, 1.42],
    [0.10, 0.0, 0.92], [0.11, 0.0, 0.50], [0.12, 0.0, 0.08],
    [-0.10, 0.0, 0.92], [-0.11, 0.0, 0.50], [-0.12, 0.0, 0.08],
])
# capsule radius of the bone ending at each joint (index 0 unused)
BONE_RADII = (0.0, 0.12, 0.13, 0.09, 0.055, 0.05, 0.04, 0.055, 0.05, 0.04, 0.09, 0.07, 0.05, 0.09, 0.07, 0.05)
# colour group of the bone ending at each joint: 0 top, 1 skin, 2 bottom
BONE_PART = (0, 0, 0, 1, 0, 0, 1, 0, 0, 1, 2, 2, 2, 2, 2, 2)
ARM_JOINTS = (5, 6, 8, 9)
LEG_JOINTS = (11, 12, 14, 15)
RING = 8
SMPL_VERTEX_COUNT = 6480
SMPL_DOWNSAMPLED = 431


@dataclass
class BodyTemplate:
    rest_vertices: Tensor       # (V, 3) metres
    skinning_weights: Tensor    # (V, J)
    parents: tuple[int, ...]
    shape_basis: Tensor         # (V, 3, S) metres per unit beta
    joint_regressor: Tensor     # (J, V)
    bone_radii: tuple[float, ...] = BONE_RADII
    bone_part: tuple[int, ...] = BONE_PART
    vertex_bone: Tensor | None = None
    _downsample_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    def validate(self):
        V, J = self.skinning_weights.shape
        if self.rest_vertices.shape != (V, 3) or self.joint_regressor.shape != (J, V):
            raise ValueError("template arrays disagree on vertex/joint counts")
        if self.shape_basis.shape[:2] != (V, 3):
            raise ValueError("shape basis must be (V, 3, S)")
        if len(self.parents) != J:
            raise ValueError("parent list length differs from joint count")
        w = self.skinning_weights
        if (w < 0).any() or (w.sum(1) - 1).abs().max() > 1e-6:
            raise ValueError("skinning weights must be nonnegative with unit row sums")
        if (self.joint_regressor.sum(1) - 1).abs().max() > 1e-6:
            raise ValueError("joint regressor rows must sum to 1")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ValueError("joint tree needs exactly one root")
        for j, p in enumerate(self.parents):
            if p >= j and p >= 0:
                raise ValueError("parents must precede children (acyclic, topologically ordered)")

    def to(self, dtype) -> "BodyTemplate":
        return BodyTemplate(
            self.rest_vertices.to(dtype), self.skinning_weights.to(dtype), self.parents,
            self.shape_basis.to(dtype), self.joint_regressor.to(dtype), self.bone_radii, self.bone_part,
            self.vertex_bone, dict(self._downsample_cache),
        )

    def default_downsample_target(self) -> int:
        if self.n_vertices == SMPL_VERTEX_COUNT:
            return SMPL_DOWNSAMPLED
        return math.ceil(0.066 * self.n_vertices)

    def downsample_indices(self, target: int | None = None) -> Tensor:
        target = self.default_downsample_target() if target is None else target
        if target not in self._downsample_cache:
            pts = self.rest_vertices.detach().cpu().numpy()
            self._downsample_cache[target] = torch.as_tensor(farthest_point_indices(pts, target, seed=0))
        return self._downsample_cache[target]

    def save(self, path: str | Path):
        doc = {
            "rest_vertices": {"shape": list(self.rest_vertices.shape), "data": self.rest_vertices.tolist()},
            "skinning_weights": {"shape": list(self.skinning_weights.shape), "data": self.skinning_weights.tolist()},
            "shape_basis": {"shape": list(self.shape_basis.shape), "data": self.shape_basis.tolist()},
            "joint_regressor": {"shape": list(self.joint_regressor.shape), "data": self.joint_regressor.tolist()},
            "parents": list(self.parents),
            "bone_radii": list(self.bone_radii),
            "bone_part": list(self.bone_part),
            "units": "meters",
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "BodyTemplate":
        doc = json.loads(Path(path).read_text())

        def arr(key):
            a = np.asarray(doc[key]["data"], dtype=np.float64)
            return torch.tensor(a.reshape(doc[key]["shape"]))

        return cls(
            arr("rest_vertices"), arr("skinning_weights"), tuple(doc["parents"]), arr("shape_basis"),
            arr("joint_regressor"), tuple(doc["bone_radii"]), tuple(doc["bone_part"]),
        )


@dataclass
class BodyParams:
    pose: Tensor         # (J, 3) axis-angle, radians
    shape: Tensor        # (S,)
    translation: Tensor  # (3,) metres

    @classmethod
    def zeros(cls, n_joints: int = 16, n_shape: int = 4, dtype=torch.float64) -> "BodyParams":
        return cls(torch.zeros(n_joints, 3, dtype=dtype), torch.zeros(n_shape, dtype=dtype), torch.zeros(3, dtype=dtype))

    def flat(self) -> Tensor:
        return torch.cat([self.pose.reshape(-1), self.shape, self.translation])

    @classmethod
    def from_flat(cls, vec: Tensor, n_joints: int, n_shape: int) -> "BodyParams":
        p = n_joints * 3
        return cls(vec[:p].reshape(n_joints, 3), vec[p : p + n_shape], vec[p + n_shape : p + n_shape + 3])

    def detach(self) -> "BodyParams":
        return BodyParams(self.pose.detach(), self.shape.detach(), self.translation.detach())

    def to(self, dtype) -> "BodyParams":
        return BodyParams(self.pose.to(dtype), self.shape.to(dtype), self.translation.to(dtype))

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.detach().cpu().numpy().tolist(),
            "shape": self.shape.detach().cpu().numpy().tolist(),
            "translation": self.translation.detach().cpu().numpy().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, dtype=torch.float64) -> "BodyParams":
        return cls(
            torch.tensor(np.asarray(d["pose"], dtype=np.float64), dtype=dtype),
            torch.tensor(np.asarray(d["shape"], dtype=np.float64), dtype=dtype),
            torch.tensor(np.asarray(d["translation"], dtype=np.float64), dtype=dtype),
        )


@dataclass
class Keypoints2D:
    uv: Tensor          # (J, 2) pixels
    confidence: Tensor  # (J,) in [0, 1]


# ---------------------------------------------------------------------------
# rotations


def wrap_axis_angle(aa: Tensor) -> Tensor:
    """Reduce rotation angles to [0, 2pi) without changing the rotation."""
    norm = aa.norm(dim=-1, keepdim=True)
    big = norm >= 2 * math.pi
    if not bool(big.any()):
        return aa
    safe = torch.where(big, norm, torch.ones_like(norm))
    return torch.where(big, aa * torch.remainder(safe, 2 * math.pi) / safe, aa)


def rodrigues(aa: Tensor) -> Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    theta2 = (aa * aa).sum(-1)
    small = theta2 < 1e-12
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / safe2)
    x, y, z = aa.unbind(-1)
    zero = torch.zeros_like(x)
    Kx = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(aa.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=aa.dtype).expand_as(Kx)
    return eye + a[..., None, None] * Kx + b[..., None, None] * (Kx @ Kx)


# ---------------------------------------------------------------------------
# skinning


def _check_params(template: BodyTemplate, params: BodyParams):
    if params.pose.shape != (template.n_joints, 3) or params.shape.shape != (template.n_shape,):
        raise ValueError("body parameters do not match the template dimensions")
    for t in (params.pose, params.shape, params.translation):
        if not bool(torch.isfinite(t).all()):
            raise ValueError("non-finite body parameters")


def forward_kinematics(template: BodyTemplate, params: BodyParams):
    """Return shaped rest joints (J,3), global rotations (J,3,3), global joint positions (J,3).

    Positions exclude the global translation.
    """
    v_shaped = template.rest_vertices + template.shape_basis @ params.shape
    joints = template.joint_regressor @ v_shaped
    rots = rodrigues(wrap_axis_angle(params.pose))
    g_rot, g_pos = [], []
    for j, p in enumerate(template.parents):
        if p < 0:
            g_rot.append(rots[j])
            g_pos.append(joints[j])
        else:
            g_rot.append(g_rot[p] @ rots[j])
            g_pos.append(g_pos[p] + g_rot[p] @ (joints[j] - joints[p]))
    return v_shaped, joints, torch.stack(g_rot), torch.stack(g_pos)


def skin(template: BodyTemplate, params: BodyParams) -> Tensor:
    _check_params(template, params)
    v_shaped, joints, g_rot, g_pos = forward_kinematics(template, params)
    # per-joint affine map x -> A_j x + b_j with b_j = g_pos_j - A_j joint_j
    offs = g_pos - (g_rot @ joints[:, :, None])[..., 0]
    w = template.skinning_weights
    A = torch.einsum("vj,jab->vab", w, g_rot)
    b = w @ offs
    return (A @ v_shaped[:, :, None])[..., 0] + b + params.translation


def posed_joints(template: BodyTemplate, params: BodyParams) -> Tensor:
    """Kinematic joint positions in world space (used for capsule geometry)."""
    _check_params(template, params)
    return forward_kinematics(template, params)[3] + params.translation


def regress_joints(template: BodyTemplate, vertices: Tensor) -> Tensor:
    return template.joint_regressor @ vertices


def keypoints2d(template: BodyTemplate, params: BodyParams, camera: Camera) -> Keypoints2D:
    joints = regress_joints(template, skin(template, params))
    uv, depth = project(joints, camera)
    conf = (depth > BEHIND_EPS).to(uv.dtype)
    return Keypoints2D(uv, conf)


def downsample(vertices: Tensor, template: BodyTemplate, target: int | None = None) -> Tensor:
    target = template.default_downsample_target() if target is None else target
    if vertices.shape[0] < target:
        raise ValueError(f"cannot downsample {vertices.shape[0]} vertices to {target}")
    return vertices[template.downsample_indices(target)]


def farthest_point_indices(points: np.ndarray, target: int, seed: int = 0) -> np.ndarray:
    n = len(points)
    if target > n:
        raise ValueError(f"cannot pick {target} of {n} points")
    if target == n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for _ in range(target - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen)


# ---------------------------------------------------------------------------
# procedural template


def _perp_basis(axis: np.ndarray):
    ref = np.array([0.0, 1.0, 0.0]) if abs(axis[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def make_template(n_vertices: int = 602, seed: int = 0) -> BodyTemplate:
    """Capsule-limb humanoid with 16 joints and 4 shape components.

    Vertices are rings of 8 around each bone axis (a ring sits exactly on every
    joint, so the regressor can average it back to the joint), hemispherical
    caps on the extremities and a few random surface points to hit ``n_vertices``.
    """
    rng = np.random.default_rng(seed)
    J = len(PARENTS)
    bones = [(PARENTS[c], c) for c in range(1, J)]
    leaves = [c for c in range(1, J) if c not in PARENTS]
    n_cap = len(leaves) * (RING + 1)
    n_rings = (n_vertices - n_cap) // RING
    if n_rings < 2 * len(bones):
        raise ValueError(f"template needs at least {2 * len(bones) * RING + n_cap} vertices")
    lengths = np.array([np.linalg.norm(REST_JOINTS[c] - REST_JOINTS[p]) for p, c in bones])
    extra = n_rings - 2 * len(bones)
    share = lengths / lengths.sum() * extra
    rings = 2 + np.floor(share).astype(int)
    for i in np.argsort(-(share - np.floor(share)))[: n_rings - rings.sum()]:
        rings[i] += 1

    verts, owner, frac = [], [], []  # owner = bone child joint, frac = axial fraction
    regressor_rings = {}

    def add_ring(centre, e1, e2, radius, child, a, phase=0.0):
        start = len(verts)
        for k in range(RING):
            ang = 2 * math.pi * k / RING + phase
            verts.append(centre + radius * (math.cos(ang) * e1 + math.sin(ang) * e2))
            owner.append(child)
            frac.append(a)
        return list(range(start, start + RING))

    for (p, c), m in zip(bones, rings):
        a0, a1 = REST_JOINTS[p], REST_JOINTS[c]
        axis = (a1 - a0) / np.linalg.norm(a1 - a0)
        e1, e2 = _perp_basis(axis)
        r = BONE_RADII[c]
        for k in range(m):
            a = k / (m - 1)
            idx = add_ring(a0 + a * (a1 - a0), e1, e2, r, c, a, phase=0.3 * k)
            if k == m - 1:
                regressor_rings[c] = idx
            if k == 0 and p == 0 and c == 1:
                regressor_rings[0] = idx
        if c in leaves:
            s = math.sqrt(0.5)
            add_ring(a1 + r * s * axis, e1, e2, r * s, c, 1.0)
            verts.append(a1 + r * axis)
            owner.append(c)
            frac.append(1.0)
    while len(verts) < n_vertices:
        bi = int(rng.integers(len(bones)))
        p, c = bones[bi]
        a0, a1 = REST_JOINTS[p], REST_JOINTS[c]
        axis = (a1 - a0) / np.linalg.norm(a1 - a0)
        e1, e2 = _perp_basis(axis)
        a = float(rng.uniform(0.1, 0.9))
        ang = float(rng.uniform(0, 2 * math.pi))
        verts.append(a0 + a * (a1 - a0) + BONE_RADII[c] * (math.cos(ang) * e1 + math.sin(ang) * e2))
        owner.append(c)
        frac.append(a)

    verts = np.asarray(verts)
    owner = np.asarray(owner)
    frac = np.asarray(frac)
    V = len(verts)

    weights = np.zeros((V, J))
    for i in range(V):
        p = PARENTS[owner[i]]
        pp = PARENTS[p]
        w_pp = 0.5 * max(0.0, 1.0 - frac[i] / 0.25) if pp >= 0 else 0.0
        weights[i, p] += 1.0 - w_pp
        if w_pp > 0:
            weights[i, pp] += w_pp

    regressor = np.zeros((J, V))
    for j, idx in regressor_rings.items():
        regressor[j, idx] = 1.0 / len(idx)

    basis = np.zeros((V, 3, 4))
    basis[:, :, 0] = 0.03 * verts
    for i in range(V):
        c = owner[i]
        a0, a1 = REST_JOINTS[PARENTS[c]], REST_JOINTS[c]
        axis = (a1 - a0) / np.linalg.norm(a1 - a0)
        foot = a0 + np.clip(np.dot(verts[i] - a0, axis), 0, np.linalg.norm(a1 - a0)) * axis
        radial = verts[i] - foot
        n = np.linalg.norm(radial)
        if n > 1e-9:
            basis[i, :, 1] = 0.01 * radial / n
        if c in ARM_JOINTS:
            basis[i, 0, 2] = 0.1 * (abs(verts[i, 0]) - 0.18) * np.sign(verts[i, 0])
        if c in LEG_JOINTS:
            basis[i, 2, 3] = -0.08 * (0.92 - verts[i, 2]) / 0.84

    return BodyTemplate(
        torch.tensor(verts), torch.tensor(weights), PARENTS, torch.tensor(basis), torch.tensor(regressor),
        vertex_bone=torch.as_tensor(owner),
    )
