"""Command-line entry point: ``layerfield {synth,train,render,align,eval,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, provenance
from .dataset import DataError, find_frame, load_dataset, write_dataset
from .metrics import psnr, ssim
from .synth import synth_scene

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "LAYERFIELD_THREADS"
CHECKPOINT_NAME = "checkpoint.lfck"

log = logging.getLogger("layerfield")


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {"level": record.levelname, "logger": record.name, "message": record.getMessage()}
        if hasattr(record, "record"):
            doc["data"] = record.record
        return json.dumps(doc)


def _setup_logging(args):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if args.log_json else logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("layerfield")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    root.propagate = False


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc


def _prepare_out_dir(path: Path, force: bool):
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for key in ("iterations", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return cfg.replace(**overrides) if overrides else cfg


def _load_model(path: str):
    from .train import load_state

    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    try:
        return load_state(path).model
    except (ValueError, KeyError, RuntimeError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _emit(doc: dict, out: str | None):
    text = json.dumps(doc, indent=1, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    frames = []
    for k in range(args.frames):
        frame, _ = synth_scene(args.seed + k, args.humans, args.views, args.size,
                               perturbation=not args.no_perturbation)
        frames.append(frame)
    extra = {"generator": {"seed": args.seed, "humans": args.humans, "views": args.views, "size": args.size,
                           "frames": args.frames, "version": __version__}}
    write_dataset(out, frames, scene_id=f"synthetic-seed{args.seed}", extra=extra)
    load_dataset(out)  # round-trip through the validating loader
    log.info("wrote %d frame(s) to %s", len(frames), out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .report import plot_history, write_csv
    from .train import load_state, new_state, save_state, train

    frames, _ = load_dataset(args.data)
    out = Path(args.out)
    ckpt = out / CHECKPOINT_NAME
    if args.resume:
        if not ckpt.is_file():
            raise DataError(f"--resume given but {ckpt} does not exist")
        state = load_state(ckpt)
        if args.config and RunConfig.load(args.config).hash() != state.model.cfg.hash():
            raise ConfigError("config differs from the checkpoint being resumed")
        if args.iterations is not None:
            state.model.cfg = state.model.cfg.replace(iterations=args.iterations)
    else:
        cfg = _load_config(args)
        _prepare_out_dir(out, args.force)
        state = new_state(cfg)
        save_state(ckpt, state)
    cfg = state.model.cfg
    log.info("training %s for %d iterations (config %s)", args.data, cfg.iterations, cfg.hash())
    with open(out / "train_log.jsonl", "a") as fh:
        def record(summary):
            fh.write(json.dumps({**summary, **provenance(cfg)}) + "\n")
            fh.flush()

        train(state, frames, cfg.iterations, out, callback=record)
    write_csv(out / "history.csv", state.history)
    plot_history(state.history, out / "loss.png")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    _emit({**provenance(cfg), "checkpoint": str(ckpt), "iteration": state.iteration,
           "final": state.history[-1] if state.history else None}, None)
    return EXIT_OK


def cmd_render(args) -> int:
    from PIL import Image

    from .report import plot_comparison
    from .train import render_view

    model = _load_model(args.checkpoint)
    frames, _ = load_dataset(args.data)
    frame = find_frame(frames, args.frame)
    if not 0 <= args.query_view < len(frame.query_cameras):
        raise DataError(f"query view {args.query_view} out of range (frame has {len(frame.query_cameras)})")
    img = render_view(model, frame, frame.query_cameras[args.query_view])
    q8 = np.clip(np.rint(img.numpy().astype(np.float64) * 255), 0, 255).astype(np.uint8)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q8, mode="RGB").save(out)
    written = q8.astype(np.float64) / 255.0
    gt = frame.query_images[args.query_view].numpy()
    doc = {
        **provenance(model.cfg),
        "frame": frame.frame_id,
        "query_view": args.query_view,
        "split": frame.query_split[args.query_view],
        "image": str(out),
        "psnr": psnr(written, gt),
        "ssim": ssim(written, gt),
    }
    _emit(doc, str(out.with_suffix(".json")))
    if args.figure:
        plot_comparison(written, gt, out.with_name(out.stem + "_compare.png"),
                        f"{frame.frame_id} view {args.query_view}: {doc['psnr']:.2f} dB")
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_align(args) -> int:
    from .train import align_report

    model = _load_model(args.checkpoint)
    frames, _ = load_dataset(args.data)
    frame = find_frame(frames, args.frame)
    doc = align_report(model, frame)
    _emit(doc, args.out)
    log.info("keypoint error %.3f px -> %.3f px", doc["keypoint_error_initial"], doc["keypoint_error_aligned"])
    return EXIT_OK


def cmd_eval(args) -> int:
    from .report import plot_comparison, plot_view_metrics, write_csv
    from .train import evaluate, render_view

    model = _load_model(args.checkpoint)
    frames, _ = load_dataset(args.data)
    if not any(f.split_indices(args.split) for f in frames):
        raise DataError(f"split '{args.split}' has no query views")
    doc = evaluate(model, frames, args.split)
    _emit(doc, args.out)
    if args.report_dir:
        rd = Path(args.report_dir)
        rd.mkdir(parents=True, exist_ok=True)
        write_csv(rd / "metrics.csv", doc["views"])
        plot_view_metrics(doc["views"], rd / "metrics.png")
        for row in doc["views"]:
            frame = find_frame(frames, row["frame"])
            q = row["query_view"]
            img = render_view(model, frame, frame.query_cameras[q]).numpy()
            plot_comparison(img, frame.query_images[q].numpy(), rd / f"{frame.frame_id}_q{q}.png",
                            f"{frame.frame_id} view {q}: {row['psnr']:.2f} dB")
    log.info("%s: mean PSNR %.3f dB, mean SSIM %.4f over %d views", args.split, doc["mean_psnr"],
             doc["mean_ssim"], len(doc["views"]))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import plot_alignment, plot_bars, plot_histories, write_csv, write_json

    src = Path(args.results)
    docs = {}
    for path in sorted(src.glob("*.json")):
        try:
            docs[path.stem] = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not docs:
        raise DataError(f"no experiment results in {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overfit = {k: d for k, d in docs.items() if d.get("kind") == "overfit"}
    rows = [{"run": k, "seed": d["seed"], "test_psnr": d["test_psnr"], "test_ssim": d["test_ssim"],
             "train_psnr": d["train_psnr"], "train_minutes": d["train_seconds"] / 60,
             "overrides": json.dumps(d["args"].get("overrides", {}), sort_keys=True), "fingerprint": d["fingerprint"]}
            for k, d in overfit.items()]
    summary = {"version": __version__, "overfit": rows}
    if rows:
        write_csv(out / "overfit.csv", rows)
        plot_histories({k: d["history"] for k, d in overfit.items()}, out / "overfit_psnr.png")
        plot_histories({k: d["history"] for k, d in overfit.items()}, out / "overfit_loss.png", "loss", "loss")
        plot_bars({r["run"]: r["test_psnr"] for r in rows}, out / "overfit_test_psnr.png", "held-out PSNR (dB)")
    for k, d in docs.items():
        if d.get("kind") == "alignment":
            write_csv(out / f"{k}.csv", d["scenes"])
            plot_alignment(d["scenes"], out / f"{k}.png")
            summary[k] = {key: d[key] for key in ("mean_error_initial", "mean_error_aligned", "ratio",
                                                  "mean_scene_ratio", "n_train", "n_eval", "size", "fingerprint")
                          if key in d}
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerfield", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--log-json", action="store_true", help="structured JSON log lines on stderr")
    p.add_argument("--threads", type=int, default=None, help=f"torch worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-human dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--humans", type=int, default=2)
    s.add_argument("--views", type=int, default=3)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--no-perturbation", action="store_true", help="use ground-truth body parameters as the fit")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one query view and score it")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--frame")
    r.add_argument("--query-view", type=int, required=True)
    r.add_argument("--out", required=True, help="output PNG; metrics go next to it as .json")
    r.add_argument("--figure", action="store_true", help="also write a render/reference/error figure")
    r.set_defaults(func=cmd_render)

    a = sub.add_parser("align", help="align body parameters and report keypoint reprojection error")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--frame")
    a.add_argument("--out")
    a.set_defaults(func=cmd_align)

    e = sub.add_parser("eval", help="aggregate PSNR/SSIM over a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out")
    e.add_argument("--report-dir", help="write metrics.csv and figures here")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="tables and figures from stored experiment results")
    rp.add_argument("--results", default="results", help="directory of experiment result JSON files")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    from .train import NumericalAbort

    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        torch.set_num_threads(_threads(args))
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalAbort as exc:
        log.error("numerical abort: %s (dump: %s)", exc, exc.dump_path)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
