"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or finite differences so it shares
no code path with the library routines it checks.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def fd_gradient(f, x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Central differences of a scalar function of one float64 tensor (forward evaluation only)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat = x.view(-1)
    gf = g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + eps
            hi = float(f(x))
            flat[i] = old - eps
            lo = float(f(x))
            flat[i] = old
            gf[i] = (hi - lo) / (2 * eps)
    return g


def autograd_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    (g,) = torch.autograd.grad(out, x)
    return g


def grad_rel_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-3) -> float:
    """Max relative error over entries with |numeric| >= floor; smaller entries are compared absolutely."""
    a, n = analytic.detach().reshape(-1), numeric.detach().reshape(-1)
    big = n.abs() >= floor
    rel = ((a - n).abs() / n.abs().clamp(min=floor))
    small_abs = (a - n).abs()[~big]
    worst = float(rel[big].max()) if bool(big.any()) else 0.0
    if small_abs.numel():
        worst = max(worst, float(small_abs.max()) / floor)
    return worst


def check_gradient(f, x: torch.Tensor, eps: float = 1e-4) -> float:
    return grad_rel_error(autograd_gradient(f, x), fd_gradient(f, x, eps))


def conv_loop(inp: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Naive N-d cross-correlation for (C, *spatial) inputs and (O, C, *k) filters."""
    nd = inp.ndim - 1
    x = np.pad(inp, [(0, 0)] + [(pad, pad)] * nd)
    k = w.shape[2:]
    out_shape = [(x.shape[1 + d] - k[d]) // stride + 1 for d in range(nd)]
    out = np.zeros([w.shape[0]] + out_shape)
    for o in range(w.shape[0]):
        for idx in np.ndindex(*out_shape):
            sl = tuple(slice(i * stride, i * stride + kk) for i, kk in zip(idx, k))
            out[(o,) + idx] = np.sum(x[(slice(None),) + sl] * w[o])
    return out


def ssim_loop(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Sliding-window SSIM written directly from the definition."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = 0.01**2, 0.03**2
    H, W, C = a.shape
    vals = []
    for c in range(C):
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                pa = a[i : i + size, j : j + size, c]
                pb = b[i : i + size, j : j + size, c]
                ma, mb = (win * pa).sum(), (win * pb).sum()
                va = (win * (pa - ma) ** 2).sum()
                vb = (win * (pb - mb) ** 2).sum()
                cov = (win * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def rotation_matrix(aa: np.ndarray) -> np.ndarray:
    """Axis-angle to matrix via the matrix exponential series (no Rodrigues formula)."""
    k = np.array([[0, -aa[2], aa[1]], [aa[2], 0, -aa[0]], [-aa[1], aa[0], 0]], dtype=np.float64)
    out = np.eye(3)
    term = np.eye(3)
    for n in range(1, 40):
        term = term @ k / n
        out = out + term
    return out


def skin_loop(template, pose: np.ndarray, shape: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Per-vertex transform chain: blend shapes, regress joints, walk to the root, blend, translate."""
    rest = template.rest_vertices.numpy() + np.einsum("vcs,s->vc", template.shape_basis.numpy(), shape)
    joints = template.joint_regressor.numpy() @ rest
    parents = template.parents
    W = template.skinning_weights.numpy()
    out = np.zeros_like(rest)
    for v in range(rest.shape[0]):
        acc = np.zeros(3)
        for j in range(len(parents)):
            if W[v, j] == 0:
                continue
            # apply rotations from joint j up to the root
            p = rest[v].copy()
            node = j
            while node >= 0:
                par = parents[node]
                p = rotation_matrix(pose[node]) @ (p - joints[node]) + joints[node]
                node = par
            acc += W[v, j] * p
        out[v] = acc + trans
    return out


def slab_stepping(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray, t_max: float, step: float = 1e-3):
    """Classify a ray against a box by marching: returns (hit, first inside t, last inside t)."""
    ts = np.arange(step / 2, t_max, step)
    pts = o[None] + ts[:, None] * d[None]
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    if not inside.any():
        return False, math.nan, math.nan
    idx = np.flatnonzero(inside)
    return True, ts[idx[0]], ts[idx[-1]]


def box_sdf(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Exact signed distance from points (..., 3) to an axis-aligned box."""
    c, h = (lo + hi) / 2, (hi - lo) / 2
    q = np.abs(p - c) - h
    outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0)
    return outside + inside


def _march(o, d, lo, hi, t_max, tol, max_steps):
    lo, hi = np.broadcast_to(lo, o.shape), np.broadcast_to(hi, o.shape)
    t = np.zeros(len(o))
    hit = np.zeros(len(o), dtype=bool)
    active = np.ones(len(o), dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        dist = box_sdf(o[active] + t[active, None] * d[active], lo[active], hi[active])
        idx = np.flatnonzero(active)
        now = dist <= tol
        hit[idx[now]] = True
        t[idx[~now]] += dist[~now]
        active[idx[now]] = False
        active[idx[~now][t[idx[~now]] > t_max]] = False
    return hit, t


def sphere_trace_box(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray, t_max: float,
                     tol: float = 1e-10, max_steps: int = 20000):
    """Classify rays (R, 3) against boxes (3,) or (R, 3) by distance-bounded marching.

    Marches forward from each origin for the entry depth and backward from
    ``t_max`` for the exit depth. Returns (hit, t_in, t_out).
    """
    hit, t_in = _march(o, d, lo, hi, t_max, tol, max_steps)
    back_hit, t_back = _march(o + t_max * d, -d, lo, hi, t_max, tol, max_steps)
    t_out = t_max - t_back
    return hit & back_hit, np.where(hit, t_in, np.nan), np.where(hit, t_out, np.nan)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    """Keep one summary line per acceptance criterion; printed at the end of the run."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
