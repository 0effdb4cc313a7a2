"""Scaled-down training experiments with a fingerprinted result cache.

Three protocols are provided:

* ``overfit``: train on one synthetic scene and score the held-out ring view.
* ``ablation``: the same run with one component switched off.
* ``alignment``: train the alignment module alone on freshly perturbed body
  parameters of many scenes, then measure keypoint reprojection error on
  held-out scenes before and after alignment.

Results are plain JSON documents. :func:`cached` stores them next to a
fingerprint of the protocol arguments and of the model source files, so a
stored result is reused only while the code that produced it is unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .bodymodel import BodyParams
from .config import RunConfig
from .synth import synth_scene
from .train import align_report, evaluate, new_state, train

log = logging.getLogger("layerfield.experiments")

# files whose content determines experiment outcomes; I/O and reporting are excluded
MODEL_SOURCES = (
    "alignment.py", "bodymodel.py", "camera.py", "config.py", "diffmath.py", "experiments.py", "fusion.py",
    "imagefeat.py", "layeredrays.py", "metrics.py", "model.py", "render.py", "synth.py", "train.py",
    "voxeldiffuse.py",
)

ABLATIONS = {
    "full": {},
    "no_alignment": {"use_alignment": False},
    "average_fusion": {"fusion_mode": "average"},
}

ALIGN_TRAIN_SEED0 = 1000
ALIGN_EVAL_SEED0 = 5000


def source_fingerprint() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in MODEL_SOURCES:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


def fingerprint(kind: str, args: dict) -> str:
    blob = json.dumps({"kind": kind, "args": args, "source": source_fingerprint()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached(path: str | Path, kind: str, args: dict, run: Callable[[], dict], rerun: bool = False) -> dict:
    """Return the stored result at ``path`` if its fingerprint matches, else run and store."""
    path = Path(path)
    key = fingerprint(kind, args)
    if path.is_file() and not rerun:
        doc = json.loads(path.read_text())
        if doc.get("fingerprint") == key:
            log.info("reusing %s (%s)", path, key)
            return doc
        log.info("stale result in %s, rerunning", path)
    doc = {**run(), "kind": kind, "args": args, "fingerprint": key, "version": __version__}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
    tmp.replace(path)
    return doc


def _progress(tag: str):
    def cb(summary: dict):
        log.info("%s iter %d loss %.5f", tag, summary["iteration"], summary["loss"], extra={"record": summary})
    return cb


def run_overfit(seed: int = 0, iterations: int = 5000, overrides: dict | None = None) -> dict:
    """Train on ``synth_scene(seed)`` (N=2, B=3, 64x64) and score its held-out view."""
    cfg = RunConfig(seed=seed, iterations=iterations, checkpoint_every=0, **(overrides or {}))
    frame, _ = synth_scene(seed)
    state = new_state(cfg)
    t0 = time.time()
    train(state, [frame], iterations, callback=_progress(f"overfit[{seed}{'' if not overrides else overrides}]"))
    seconds = time.time() - t0
    test = evaluate(state.model, [frame], "test")
    tr = evaluate(state.model, [frame], "train")
    return {
        "seed": seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "train_seconds": seconds,
        "test_psnr": test["mean_psnr"],
        "test_ssim": test["mean_ssim"],
        "train_psnr": tr["mean_psnr"],
        "views": test["views"],
        "history": state.history,
    }


def alignment_frames(first_seed: int, count: int, size: int = 64):
    # only the input views matter for alignment, so the ring holds just the input cameras
    return [synth_scene(first_seed + k, n_humans=2, n_views=3, size=size, n_ring=3)[0] for k in range(count)]


def run_alignment(n_train: int = 200, n_eval: int = 20, iterations: int = 6000, size: int = 64,
                  overrides: dict | None = None) -> dict:
    """Keypoint-supervised alignment training on perturbed parameters; held-out recovery statistics.

    Training scenes and held-out scenes come from disjoint seed ranges. Every
    training step perturbs the ground-truth parameters afresh; the held-out
    scenes keep their synth_scene default perturbation.
    """
    base = {"lambda_ph": 0.0, "perturb_every_step": True}
    cfg = RunConfig(iterations=iterations, checkpoint_every=0, log_every=100, **{**base, **(overrides or {})})
    t0 = time.time()
    train_frames = alignment_frames(ALIGN_TRAIN_SEED0, n_train, size)
    eval_frames = alignment_frames(ALIGN_EVAL_SEED0, n_eval, size)
    state = new_state(cfg)
    t1 = time.time()
    train(state, train_frames, iterations, callback=_progress("alignment"))
    seconds = time.time() - t1
    rows = []
    for frame in eval_frames:
        rep = align_report(state.model, frame)
        p_err0 = [float(torch.linalg.norm(p0.flat() - pg.flat())) for p0, pg in zip(frame.params0, frame.params_gt)]
        p_err1 = [
            float(torch.linalg.norm(BodyParams.from_dict(pa).flat() - pg.flat()))
            for pa, pg in zip(rep["params_aligned"], frame.params_gt)
        ]
        rows.append({
            "frame": frame.frame_id,
            "keypoint_error_initial": rep["keypoint_error_initial"],
            "keypoint_error_aligned": rep["keypoint_error_aligned"],
            "ratio": rep["ratio"],
            "param_error_initial": float(np.mean(p_err0)),
            "param_error_aligned": float(np.mean(p_err1)),
        })
    before = float(np.mean([r["keypoint_error_initial"] for r in rows]))
    after = float(np.mean([r["keypoint_error_aligned"] for r in rows]))
    return {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "n_train": n_train,
        "n_eval": n_eval,
        "size": size,
        "data_seconds": t1 - t0,
        "train_seconds": seconds,
        "scenes": rows,
        "mean_error_initial": before,
        "mean_error_aligned": after,
        "ratio": after / before,
        "mean_scene_ratio": float(np.mean([r["ratio"] for r in rows])),
        "history": state.history,
    }

