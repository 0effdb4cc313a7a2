"""Training loop, checkpoints, evaluation and alignment reports."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .bodymodel import BodyParams, make_template
from .config import RunConfig, provenance
from .diffmath import AdamState, adam_step, load_checkpoint, save_checkpoint
from .layeredrays import image_pixels, intersect_layers, make_rays
from .metrics import psnr, ssim
from .model import FrameContext, LayeredField
from .render import LossWeights, total_loss
from .synth import SceneFrame, perturb

log = logging.getLogger("layerfield.train")


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; ``dump_path`` holds the offending batch."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(cfg.lambda_ph, cfg.lambda_kpts, cfg.lambda_reg)


def iteration_rng(cfg: RunConfig, it: int) -> np.random.Generator:
    # every iteration draws from its own stream, so a resumed run replays exactly
    return np.random.default_rng([cfg.seed, 7, it])


def sample_pixels(ctx: FrameContext, camera, n_rays: int, n_random: int, rng: np.random.Generator) -> torch.Tensor:
    """Pixel indices: mostly rays that hit some layer box, plus a few anywhere in the image."""
    pix = image_pixels(camera.width, camera.height, ctx.images.dtype)
    with torch.no_grad():
        boxes = [(lo.detach(), hi.detach()) for lo, hi in ctx.boxes]
        hit = intersect_layers(make_rays(camera, pix), boxes).hit.any(dim=1).numpy()
    hit_idx = np.flatnonzero(hit)
    n_box = n_rays - n_random
    if len(hit_idx) == 0:
        n_box, n_random = 0, n_rays
    chosen = rng.choice(hit_idx, size=n_box, replace=len(hit_idx) < n_box) if n_box else np.empty(0, dtype=np.int64)
    extra = rng.integers(0, len(pix), size=n_random)
    return torch.from_numpy(np.concatenate([chosen, extra]).astype(np.int64))


@dataclass
class TrainState:
    model: LayeredField
    adam: AdamState
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    def parameters(self) -> list[torch.Tensor]:
        return [p for _, p in sorted(self.model.named_parameters())]


def new_state(cfg: RunConfig) -> TrainState:
    model = LayeredField(cfg, make_template())
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return TrainState(model, adam)


def save_state(path: str | Path, state: TrainState):
    cfg = state.model.cfg
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    names = [n for n, _ in sorted(state.model.named_parameters())]
    for n, m, v in zip(names, state.adam.first_moment, state.adam.second_moment):
        tensors[f"adam_m/{n}"] = m
        tensors[f"adam_v/{n}"] = v
    meta = {
        **provenance(cfg),
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "adam_step": state.adam.step_count,
        "history": state.history,
    }
    tmp = Path(str(path) + ".tmp")
    save_checkpoint(tmp, tensors, meta)
    tmp.replace(path)


def load_state(path: str | Path, cfg: RunConfig | None = None) -> TrainState:
    tensors, meta = load_checkpoint(path)
    cfg = cfg or RunConfig.from_dict(meta["config"])
    state = new_state(cfg)
    model_sd = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    state.model.load_state_dict(model_sd)
    names = [n for n, _ in sorted(state.model.named_parameters())]
    if f"adam_m/{names[0]}" in tensors:
        state.adam.first_moment = [tensors[f"adam_m/{n}"] for n in names]
        state.adam.second_moment = [tensors[f"adam_v/{n}"] for n in names]
    state.adam.step_count = int(meta.get("adam_step", 0))
    state.iteration = int(meta.get("iteration", 0))
    state.history = list(meta.get("history", []))
    return state


def _dump_batch(out_dir: Path | None, info: dict) -> Path | None:
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"abort_iter{info['iteration']:06d}.json"
    path.write_text(json.dumps(info, indent=1))
    return path


def train_step(state: TrainState, frames: list[SceneFrame], dump_dir: Path | None = None) -> dict:
    model, cfg = state.model, state.model.cfg
    it = state.iteration
    rng = iteration_rng(cfg, it)
    fi = int(rng.integers(len(frames)))
    frame = frames[fi]
    train_q = frame.split_indices("train")
    if not train_q:
        raise ValueError(f"frame {frame.frame_id} has no training query views")
    qi = train_q[int(rng.integers(len(train_q)))]
    params0 = None
    if cfg.perturb_every_step and frame.params_gt is not None:
        params0 = [perturb(p, rng) for p in frame.params_gt]

    ctx = model.prepare(frame, params0)
    weights = loss_weights(cfg)
    pred_rgb = gt_rgb = None
    pix = None
    if weights.ph > 0:
        camera = frame.query_cameras[qi].to(model.dtype)
        pix = sample_pixels(ctx, camera, cfg.rays_per_batch, cfg.random_rays, rng)
        rays = make_rays(camera, image_pixels(camera.width, camera.height, model.dtype)[pix])
        gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
        pred_rgb, _ = model.render_rays(ctx, rays, stratified=True, generator=gen)
        gt_rgb = frame.query_images[qi].reshape(-1, 3)[pix].to(model.dtype)
    kp = model.keypoints(ctx)
    loss, terms = total_loss(pred_rgb, gt_rgb, kp, frame.kpts_uv.to(model.dtype), frame.kpts_conf.to(model.dtype),
                             ctx.params, weights)
    if not bool(torch.isfinite(loss.detach())):
        info = {
            "iteration": it, "frame": frame.frame_id, "query_view": qi, "terms": terms,
            "pixels": None if pix is None else pix.tolist(),
            "params": [p.detach().to_dict() for p in ctx.params],
        }
        path = _dump_batch(dump_dir, info)
        raise NumericalAbort(f"non-finite loss at iteration {it}: {terms}", path)

    params = state.parameters()
    for p in params:
        p.grad = None
    loss.backward()
    adam_step(params, [p.grad for p in params], state.adam)
    state.iteration += 1
    rec = {"iteration": state.iteration, "loss": float(loss.detach()), **terms}
    if pred_rgb is not None:
        rec["batch_psnr"] = psnr(pred_rgb, gt_rgb)
    return rec


def train(state: TrainState, frames: list[SceneFrame], iterations: int | None = None, out_dir: str | Path | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainState:
    """Run until ``iterations`` total steps (config default), checkpointing into ``out_dir``."""
    cfg = state.model.cfg
    target = cfg.iterations if iterations is None else iterations
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state.model.train()
    window: list[dict] = []
    t0 = time.time()
    while state.iteration < target:
        rec = train_step(state, frames, out)
        window.append(rec)
        if state.iteration % cfg.log_every == 0 or state.iteration == target:
            summary = {k: float(np.mean([r[k] for r in window if k in r])) for k in rec if k != "iteration"}
            summary["iteration"] = state.iteration
            summary["seconds"] = round(time.time() - t0, 2)
            state.history.append(summary)
            log.info("iter %d loss %.5f", state.iteration, summary["loss"], extra={"record": summary})
            if callback:
                callback(summary)
            window = []
        if out is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_state(out / "checkpoint.lfck", state)
    if out is not None:
        save_state(out / "checkpoint.lfck", state)
    return state


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def render_view(model: LayeredField, frame: SceneFrame, camera, ctx: FrameContext | None = None) -> torch.Tensor:
    model.eval()
    ctx = ctx or model.prepare(frame)
    return model.render_image(ctx, camera).clamp(0, 1)


@torch.no_grad()
def evaluate(model: LayeredField, frames: list[SceneFrame], split: str = "test") -> dict:
    """Per-view PSNR/SSIM on the query views of ``split`` and their means."""
    rows = []
    for frame in frames:
        idx = frame.split_indices(split)
        if not idx:
            continue
        ctx = model.prepare(frame)
        for q in idx:
            img = render_view(model, frame, frame.query_cameras[q], ctx)
            gt = frame.query_images[q]
            rows.append({"frame": frame.frame_id, "query_view": q, "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
    if not rows:
        raise ValueError(f"split '{split}' has no query views")
    return {
        **provenance(model.cfg),
        "split": split,
        "views": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
    }


def keypoint_error(model: LayeredField, frame: SceneFrame, params: list[BodyParams]) -> float:
    """Confidence-weighted mean pixel distance between projected joints and the frame's keypoints."""
    from .bodymodel import keypoints2d

    num = den = 0.0
    for h, p in enumerate(params):
        for b, cam in enumerate(frame.cameras):
            kp = keypoints2d(model.template, p.to(model.dtype), cam.to(model.dtype))
            w = frame.kpts_conf[h, b].to(model.dtype) * kp.confidence
            d = torch.linalg.norm(kp.uv - frame.kpts_uv[h, b].to(model.dtype), dim=-1)
            num += float((w * d).sum())
            den += float(w.sum())
    return num / den if den > 0 else math.nan


@torch.no_grad()
def align_report(model: LayeredField, frame: SceneFrame, params0: list[BodyParams] | None = None) -> dict:
    model.eval()
    params0 = params0 or frame.params0
    ctx = model.prepare(frame, params0)
    before = keypoint_error(model, frame, params0)
    after = keypoint_error(model, frame, ctx.params)
    return {
        **provenance(model.cfg),
        "frame": frame.frame_id,
        "params0": [p.to_dict() for p in params0],
        "params_aligned": [p.detach().to(torch.float64).to_dict() for p in ctx.params],
        "align_steps": len(ctx.aligned.history[0]) - 1,
        "offset_norms": [float(torch.linalg.norm(p.flat() - q.flat())) for p, q in zip(ctx.params, params0)],
        "keypoint_error_initial": before,
        "keypoint_error_aligned": after,
        "ratio": after / before if before > 0 else math.nan,
    }
