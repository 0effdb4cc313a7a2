"""Figures and delimited tables for training logs and evaluation results."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_csv(path: str | Path, rows: list[dict]):
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_json(path: str | Path, doc: dict):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def plot_history(history: list[dict], path: str | Path):
    """Loss terms (log scale) and batch PSNR against iteration."""
    if not history:
        return None
    it = [h["iteration"] for h in history]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key in ("loss", "photometric", "keypoints", "regularizer"):
        vals = [h.get(key, np.nan) for h in history]
        if np.any(np.asarray(vals) > 0):
            ax0.plot(it, vals, label=key)
    ax0.set_yscale("log")
    ax0.set_xlabel("iteration")
    ax0.legend(fontsize=7)
    ax0.set_title("loss terms")
    if any("batch_psnr" in h for h in history):
        ax1.plot(it, [h.get("batch_psnr", np.nan) for h in history], color="tab:green")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("dB")
    ax1.set_title("batch PSNR")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_comparison(pred: np.ndarray, gt: np.ndarray, path: str | Path, title: str = ""):
    """Rendered image, reference and absolute error side by side."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    err = np.abs(pred - gt).mean(-1)
    fig, axes = plt.subplots(1, 3, figsize=(8, 2.9))
    for ax, img, name in zip(axes, (pred, gt, err), ("render", "reference", "|error|")):
        if img.ndim == 2:
            im = ax.imshow(img, cmap="magma", vmin=0, vmax=max(float(img.max()), 1e-3))
            fig.colorbar(im, ax=ax, fraction=0.046)
        else:
            ax.imshow(np.clip(img, 0, 1))
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_view_metrics(rows: list[dict], path: str | Path):
    """Per-view PSNR and SSIM bars."""
    if not rows:
        return None
    labels = [f"{r['frame']}:{r['query_view']}" for r in rows]
    x = np.arange(len(rows))
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(max(6, 0.5 * len(rows) + 4), 3.2))
    ax0.bar(x, [r["psnr"] for r in rows], color="tab:blue")
    ax0.set_ylabel("PSNR (dB)")
    ax1.bar(x, [r["ssim"] for r in rows], color="tab:orange")
    ax1.set_ylabel("SSIM")
    for ax in (ax0, ax1):
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=60, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_bars(values: dict[str, float], path: str | Path, ylabel: str, title: str = ""):
    names = list(values)
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(names) + 2), 3.2))
    ax.bar(names, [values[n] for n in names], color="tab:gray")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_histories(runs: dict[str, list[dict]], path: str | Path, key: str = "batch_psnr", ylabel: str = "batch PSNR (dB)"):
    """One curve per run for a logged history field."""
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for name, hist in runs.items():
        if hist and key in hist[0]:
            ax.plot([h["iteration"] for h in hist], [h[key] for h in hist], label=name, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_alignment(rows: list[dict], path: str | Path):
    """Per-scene keypoint error before vs after alignment."""
    before = np.array([r["keypoint_error_initial"] for r in rows])
    after = np.array([r["keypoint_error_aligned"] for r in rows])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(before, after, s=14)
    top = float(max(before.max(), after.max())) * 1.05
    ax.plot([0, top], [0, top], color="gray", lw=0.8, label="no change")
    ax.plot([0, top], [0, 0.3 * top], color="tab:red", lw=0.8, ls="--", label="30% of initial")
    ax.set_xlim(0, top)
    ax.set_ylim(0, top)
    ax.set_xlabel("initial error (px)")
    ax.set_ylabel("aligned error (px)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
