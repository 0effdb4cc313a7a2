"""Dataset directories: ``manifest.json`` plus one PNG per view.

Layout::

    manifest.json
    frames/<frame_id>/input_<b>.png
    frames/<frame_id>/query_<q>.png

The manifest stores cameras as row-major K/R/t arrays, the pre-fitted body
parameters of every human, per-view keypoints with confidences and the query
views with their split label. Ground-truth parameters are optional (synthetic
data only) and used solely for evaluating alignment.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .bodymodel import BodyParams
from .camera import Camera
from .synth import SceneFrame

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Dataset directory is missing, malformed or inconsistent."""


def _write_png(path: Path, image: torch.Tensor):
    arr = np.clip(np.rint(image.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing image {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise DataError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        return np.asarray(im, dtype=np.float64) / 255.0


def frame_to_manifest(frame: SceneFrame, root: Path) -> dict:
    fdir = Path("frames") / frame.frame_id
    (root / fdir).mkdir(parents=True, exist_ok=True)
    views = []
    for b, cam in enumerate(frame.cameras):
        rel = fdir / f"input_{b}.png"
        _write_png(root / rel, frame.images[b])
        views.append({"camera": cam.to_dict(), "image": rel.as_posix()})
    queries = []
    for q, cam in enumerate(frame.query_cameras):
        rel = fdir / f"query_{q}.png"
        _write_png(root / rel, frame.query_images[q])
        queries.append({"camera": cam.to_dict(), "image": rel.as_posix(), "split": frame.query_split[q]})
    humans = []
    for h, p in enumerate(frame.params0):
        entry = {
            "params0": p.to_dict(),
            "keypoints": frame.kpts_uv[h].tolist(),
            "confidence": frame.kpts_conf[h].tolist(),
        }
        if frame.params_gt is not None:
            entry["params_gt"] = frame.params_gt[h].to_dict()
        humans.append(entry)
    return {"frame_id": frame.frame_id, "views": views, "queries": queries, "humans": humans}


def write_dataset(root: str | Path, frames: list[SceneFrame], scene_id: str = "synthetic", extra: dict | None = None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_VERSION,
        "scene_id": scene_id,
        "frames": [frame_to_manifest(f, root) for f in frames],
    }
    if extra:
        manifest.update(extra)
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise DataError(f"{where}: missing field '{key}'")
    return d[key]


def _camera(d: dict, where: str) -> Camera:
    try:
        cam = Camera.from_dict(d)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{where}: bad camera ({exc})") from exc
    for name in ("K", "R", "t"):
        if not torch.isfinite(getattr(cam, name)).all():
            raise DataError(f"{where}: non-finite camera {name}")
    if abs(float(torch.linalg.det(cam.K))) < 1e-12:
        raise DataError(f"{where}: singular intrinsics")
    return cam


def _frame_from_manifest(entry: dict, root: Path) -> SceneFrame:
    fid = _require(entry, "frame_id", "frame")
    views = _require(entry, "views", fid)
    if not views:
        raise DataError(f"{fid}: at least one input view is required")
    cams, images = [], []
    for b, v in enumerate(views):
        where = f"{fid}/view{b}"
        cam = _camera(_require(v, "camera", where), where)
        img = _read_png(root / _require(v, "image", where))
        if img.shape != (cam.height, cam.width, 3):
            raise DataError(f"{where}: image shape {img.shape} does not match camera {cam.height}x{cam.width}")
        cams.append(cam)
        images.append(img)
    if len({im.shape for im in images}) != 1:
        raise DataError(f"{fid}: input views must share one resolution")
    humans = _require(entry, "humans", fid)
    if not humans:
        raise DataError(f"{fid}: at least one human is required")
    B = len(views)
    params0, params_gt, uv, conf = [], [], [], []
    for h, hum in enumerate(humans):
        where = f"{fid}/human{h}"
        try:
            p0 = BodyParams.from_dict(_require(hum, "params0", where))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{where}: bad params0 ({exc})") from exc
        if not all(torch.isfinite(t).all() for t in (p0.pose, p0.shape, p0.translation)):
            raise DataError(f"{where}: non-finite params0")
        params0.append(p0)
        if "params_gt" in hum:
            params_gt.append(BodyParams.from_dict(hum["params_gt"]))
        k = np.asarray(_require(hum, "keypoints", where), dtype=np.float64)
        c = np.asarray(_require(hum, "confidence", where), dtype=np.float64)
        if k.ndim != 3 or k.shape[0] != B or k.shape[2] != 2 or c.shape != k.shape[:2]:
            raise DataError(f"{where}: keypoints must be (B, J, 2) with confidences (B, J); got {k.shape}, {c.shape}")
        if ((c < 0) | (c > 1)).any() or not np.isfinite(k).all():
            raise DataError(f"{where}: confidences must lie in [0, 1] and keypoints be finite")
        uv.append(k)
        conf.append(c)
    qcams, qimgs, split = [], [], []
    for q, v in enumerate(entry.get("queries", [])):
        where = f"{fid}/query{q}"
        cam = _camera(_require(v, "camera", where), where)
        img = _read_png(root / _require(v, "image", where))
        if img.shape != (cam.height, cam.width, 3):
            raise DataError(f"{where}: image shape does not match camera")
        s = v.get("split", "train")
        if s not in ("train", "test"):
            raise DataError(f"{where}: unknown split '{s}'")
        qcams.append(cam)
        qimgs.append(img)
        split.append(s)
    return SceneFrame(
        fid, cams, torch.tensor(np.stack(images)), params0,
        torch.tensor(np.stack(uv)), torch.tensor(np.stack(conf)),
        qcams, torch.tensor(np.stack(qimgs)) if qimgs else None, split,
        params_gt if len(params_gt) == len(params0) else None,
    )


def load_dataset(root: str | Path) -> tuple[list[SceneFrame], dict]:
    """Read and validate a dataset directory; raises DataError on any inconsistency."""
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"no {MANIFEST} in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format {manifest.get('format')}")
    entries = _require(manifest, "frames", str(path))
    if not entries:
        raise DataError(f"{path}: no frames")
    frames = [_frame_from_manifest(e, root) for e in entries]
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate frame ids")
    n_joints = {f.kpts_uv.shape[2] for f in frames}
    if len(n_joints) != 1 or not all(math.isfinite(float(f.images.sum())) for f in frames):
        raise DataError("frames disagree on the joint count")
    return frames, manifest


def find_frame(frames: list[SceneFrame], frame_id: str | None) -> SceneFrame:
    if frame_id is None:
        return frames[0]
    for f in frames:
        if f.frame_id == frame_id:
            return f
    raise DataError(f"unknown frame '{frame_id}'")
