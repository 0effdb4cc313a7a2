"""Differentiable tensor core.

Arrays, reverse-mode gradients and the handful of neural primitives the rest of
the package is written against. Gradient recording is delegated to torch's
autograd tape; this module pins down the contracts (shape checks, conventions,
initialisation, optimiser, checkpoint format) the pipeline relies on.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


def tensor(values, dtype=torch.float64, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(values), dtype=dtype, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul: inner extents differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax axis {axis} invalid for {x.dim()}-d input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def posenc(x: Tensor, l: int) -> Tensor:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(l-1) pi x), cos(2^(l-1) pi x)]."""
    if l < 0:
        raise ValueError("posenc: number of frequencies must be >= 0")
    if x.shape[-1] != 3:
        raise DimensionError(f"posenc expects a trailing extent of 3, got {x.shape[-1]}")
    parts = [x]
    for k in range(l):
        arg = (2.0**k) * math.pi * x
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    return torch.cat(parts, dim=-1)


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv(inp: Tensor, filters: Tensor, stride: int, padding: int, nd: int):
    if inp.dim() != nd + 2 or filters.dim() != nd + 2:
        raise DimensionError(f"conv{nd}d expects (N, C, spatial...) input and (O, C, k...) filters")
    if inp.shape[1] != filters.shape[1]:
        raise DimensionError(f"conv{nd}d: input has {inp.shape[1]} channels, filters expect {filters.shape[1]}")
    for n, k in zip(inp.shape[2:], filters.shape[2:]):
        if n + 2 * padding < k:
            raise DimensionError(f"conv{nd}d: kernel {k} larger than padded extent {n + 2 * padding}")


def conv2d(inp: Tensor, filters: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; output extent floor((n + 2p - k)/s) + 1."""
    _check_conv(inp, filters, stride, padding, 2)
    return F.conv2d(inp, filters, bias, stride=stride, padding=padding)


def conv3d(inp: Tensor, filters: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv(inp, filters, stride, padding, 3)
    return F.conv3d(inp, filters, bias, stride=stride, padding=padding)


def conv_transpose2d(inp: Tensor, filters: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    if inp.shape[1] != filters.shape[0]:
        raise DimensionError("conv_transpose2d: channel mismatch")
    return F.conv_transpose2d(inp, filters, bias, stride=stride)


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any gradient-enabled tensor")
    loss.backward()


# ---------------------------------------------------------------------------
# parameter initialisation


def uniform_fan_in_(module: nn.Module, gen: torch.Generator) -> nn.Module:
    """Re-draw every parameter from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d)):
            w = sub.weight
            if isinstance(sub, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w[0, 0].numel()
            else:
                fan_in = w[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                if sub.bias is not None:
                    sub.bias.copy_(torch.rand(sub.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
    return module


class MLP(nn.Module):
    """Fully connected ReLU stack; ``depth`` counts linear layers."""

    def __init__(self, d_in: int, width: int, d_out: int, depth: int):
        super().__init__()
        dims = [d_in] + [width] * (depth - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x

    def zero_last_(self) -> "MLP":
        with torch.no_grad():
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()
        return self


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[Tensor] = field(default_factory=list)
    second_moment: list[Tensor] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[Tensor | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    if not state.first_moment:
        state.first_moment = [torch.zeros_like(p) for p in params]
        state.second_moment = [torch.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError("Adam state does not match the parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
            if m.shape != p.shape:
                raise DimensionError("Adam moment shape differs from its parameter")
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(state.learning_rate * (m / c1) / (torch.sqrt(v / c2) + state.epsilon))


# ---------------------------------------------------------------------------
# checkpoint container
#
#   b"LFCK" | u32 format version | u64 header length | JSON header | raw blocks
#
# The header lists tensors in storage order with name, shape and dtype; blocks
# are little-endian and packed back to back.

CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": ("<f4", torch.float32), "float64": ("<f8", torch.float64), "int64": ("<i8", torch.int64)}


def _dtype_name(t: Tensor) -> str:
    for name, (_, td) in _DTYPES.items():
        if t.dtype == td:
            return name
    raise TypeError(f"unsupported checkpoint dtype {t.dtype}")


def save_checkpoint(path: str | Path, tensors: dict[str, Tensor], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        dname = _dtype_name(t)
        entries.append({"name": name, "shape": list(t.shape), "dtype": dname})
        blobs.append(t.numpy().astype(_DTYPES[dname][0], copy=False).tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    offset = 16 + hlen
    out = {}
    for entry in header["tensors"]:
        np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
        offset += nbytes
    return out, header["meta"]
