"""Command-line entry point: ``pvssd <command> [options]``.

Every command prints tab-separated rows on stdout. Errors go to stderr as
one ``key=value`` line with a nonzero exit code (2 for configuration
problems, 1 for everything else).
"""
from __future__ import annotations

import argparse
import sys
import zlib
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .autodiff import apply_checkpoint, load_checkpoint, save_checkpoint
from .cache import save_frame
from .config import ConfigError, RunConfig, dump_config, load_config, toy_preset
from .dataset import Calibration, KittiDataset, KittiFormatError, build_gt_database, detection_to_result_row
from .diagnostics import run_gradchecks
from .evaluation import DIFFICULTIES, MODES, evaluate, format_report, pr_curve_for
from .model import PVSSD
from .report import plot_loss_curve, plot_pr_curves
from .synthetic import synthetic_frames
from .train import LOG_HEADER, TrainingError, detect, format_log_row, prepare_frame, train

SPLITS = ("train", "val")
VAL_SEED_OFFSET = 1000


# --------------------------------------------------------------------------- helpers

def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        ckpt_cfg = Path(args.checkpoint).parent / "config.yaml" if getattr(args, "checkpoint", None) else None
        cfg = load_config(ckpt_cfg) if ckpt_cfg is not None and ckpt_cfg.exists() else toy_preset()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def parse_frames(spec: Optional[str]) -> Optional[list[str]]:
    """``None`` (all frames of the split), a comma list, or ``@file`` / an existing file path."""
    if spec is None:
        return None
    path = Path(spec[1:] if spec.startswith("@") else spec)
    if spec.startswith("@") or (path.suffix == ".txt" and path.exists()):
        return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    return [s.strip() for s in spec.split(",") if s.strip()]


def frame_rng(cfg: RunConfig, frame_id: str) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, zlib.crc32(frame_id.encode())])


def load_frames(cfg: RunConfig, split: str, ids: Optional[list[str]]) -> list[tuple]:
    """``(frame_id, cloud, annotation, calibration)`` tuples."""
    if cfg.data.source == "synthetic":
        seed = cfg.data.synthetic_seed + (VAL_SEED_OFFSET if split == "val" else 0)
        frames = synthetic_frames(seed, cfg.data.synthetic_frames, cfg.range, cfg.data.classes)
        by_id = {ann.frame_id: (cloud, ann) for cloud, ann in frames}
        ids = list(by_id) if ids is None else ids
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise FileNotFoundError(f"synthetic split {split} has no frame(s) {', '.join(missing)}")
        return [(i, by_id[i][0], by_id[i][1], Calibration.kitti_like()) for i in ids]
    ds = KittiDataset(cfg.data.root)
    ids = ds.split_ids(split) if ids is None else ids
    out = []
    for i in ids:
        cloud, ann, calib = ds.frame(i)
        out.append((i, cloud, ann, calib))
    return out


def prepared(cfg: RunConfig, frames) -> list:
    grid, vox = cfg.grid(), cfg.voxel_spec()
    names = tuple(a.name for a in cfg.anchors)
    return [prepare_frame(cloud, ann, grid, vox, names, frame_rng(cfg, fid)) for fid, cloud, ann, _ in frames]


def build_model(cfg: RunConfig, checkpoint: Optional[str] = None) -> PVSSD:
    model = PVSSD(cfg.model_spec(), np.random.default_rng(cfg.seed))
    if checkpoint:
        apply_checkpoint(model, load_checkpoint(checkpoint))
    return model


def emit(*cols):
    print("\t".join(str(c) for c in cols))


# --------------------------------------------------------------------------- commands

def cmd_preprocess(args, cfg: RunConfig) -> int:
    frames = load_frames(cfg, args.split, parse_frames(args.frames))
    out = Path(args.out) if args.out else Path(cfg.data.cache_dir) / cfg.cache_key()
    emit("frame", "points", "voxels", "dropped_voxels", "bev_file", "voxel_file")
    for fid, cloud, ann, _ in frames:
        pf = prepared(cfg, [(fid, cloud, ann, None)])[0]
        a, b = save_frame(out, fid, pf.bev, pf.voxels)
        emit(fid, int(pf.bev.counts.sum()), pf.voxels.num_voxels, pf.voxels.dropped_voxels, a, b)
    return 0


def cmd_render_bev(args, cfg: RunConfig) -> int:
    ids = parse_frames(args.frames)
    frames = load_frames(cfg, args.split, ids)
    out = Path(args.out or "bev")
    single_file = out.suffix.lower() == ".png"
    if single_file and len(frames) != 1:
        raise ValueError("render-bev: a .png output path needs exactly one frame")
    emit("frame", "image", "occupied_cells")
    for pf in prepared(cfg, frames):
        path = out if single_file else out / f"{pf.frame_id}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pf.bev.to_rgb8(), mode="RGB").save(path)
        emit(pf.frame_id, path, int((pf.bev.counts > 0).sum()))
    return 0


def cmd_build_gtdb(args, cfg: RunConfig) -> int:
    frames = load_frames(cfg, args.split, parse_frames(args.frames))
    db = build_gt_database([(cloud, ann) for _, cloud, ann, _ in frames])
    out = Path(args.out) if args.out else Path(cfg.data.cache_dir) / "gtdb"
    db.save(out)
    emit("class", "entries", "non_empty")
    for name in sorted({e.label for e in db.entries}):
        entries = [e for e in db.entries if e.label == name]
        emit(name, len(entries), sum(not e.empty for e in entries))
    return 0


def cmd_train_toy(args, cfg: RunConfig) -> int:
    if args.steps is not None:
        cfg.train.steps = args.steps
    out = Path(args.out or "runs/toy")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    frames = load_frames(cfg, "train", parse_frames(args.frames))
    model = build_model(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.train.augment:
        items = [(cloud, ann) for _, cloud, ann, _ in frames]
        gtdb = build_gt_database(items)
    else:
        items, gtdb = prepared(cfg, frames), None
    log_path = out / "loss.tsv"
    every = cfg.train.checkpoint_every
    with open(log_path, "w") as log:
        log.write(LOG_HEADER + "\n")

        def on_step(step, row, lr):
            log.write(format_log_row(step, row, lr) + "\n")
            log.flush()
            if every and (step + 1) % every == 0 and step + 1 < cfg.train.steps:
                save_checkpoint(out / f"checkpoint_step{step + 1}", model.named_parameters(), {"step": step + 1})

        history = train(model, items, cfg.train.steps, rng, cfg.optim, cfg.loss,
                        augment=cfg.augment if cfg.train.augment else None, gtdb=gtdb, on_step=on_step,
                        order=cfg.train.order)
    ckpt = save_checkpoint(out / "checkpoint", model.named_parameters(),
                           {"step": cfg.train.steps, "seed": cfg.seed})
    figure = plot_loss_curve(history, out / "loss_curve.png")
    emit("steps", "final_total", "loss_log", "checkpoint", "figure")
    emit(cfg.train.steps, repr(history[-1]["total"]) if history else "nan", log_path, ckpt, figure)
    return 0


def run_detection(cfg: RunConfig, model: PVSSD, frames):
    dets = []
    for pf in prepared(cfg, frames):
        dets.append(detect(model, pf, frame_rng(cfg, pf.frame_id), cfg.eval.score_threshold,
                           cfg.eval.nms_threshold))
    return dets


def cmd_eval(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise ValueError("eval: --checkpoint is required")
    model = build_model(cfg, args.checkpoint)
    frames = load_frames(cfg, args.split, parse_frames(args.frames))
    dets = run_detection(cfg, model, frames)
    gts = [ann for _, _, ann, _ in frames]
    ecfg = cfg.eval_config()
    classes = tuple(a.name for a in cfg.anchors)
    results = evaluate(dets, gts, classes, ecfg)
    table, kv = format_report(results)
    out = Path(args.out or "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(table)
    (out / "metrics.kv").write_text(kv)
    curves = {}
    for cls in classes:
        rec, prec, n_gt = pr_curve_for(dets, gts, cls, "moderate", "3d", ecfg)
        if n_gt:
            curves[f"{cls} 3d moderate"] = (rec, prec)
    plot_pr_curves(curves, out / "pr_curve.png")
    emit("class", "mode", *DIFFICULTIES)
    for cls in classes:
        for mode in MODES:
            emit(cls, mode, *("nan" if results[(cls, mode, d)] is None else f"{results[(cls, mode, d)]:.6f}"
                              for d in DIFFICULTIES))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    rows = run_gradchecks(cfg.seed)
    emit("block", "max_rel_error", "tolerance", "status")
    lines = []
    ok = True
    for name, err, tol in rows:
        status = "pass" if err < tol else "FAIL"
        ok &= err < tol
        lines.append(f"{name}\t{err:.3e}\t{tol:.0e}\t{status}")
        print(lines[-1])
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.tsv").write_text("block\tmax_rel_error\ttolerance\tstatus\n"
                                                      + "\n".join(lines) + "\n")
    return 0 if ok else 1


def cmd_infer(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise ValueError("infer: --checkpoint is required")
    model = build_model(cfg, args.checkpoint)
    frames = load_frames(cfg, args.split, parse_frames(args.frames))
    out = Path(args.out or "runs/infer")
    out.mkdir(parents=True, exist_ok=True)
    emit("frame", "detections", "result_file")
    for (fid, _, _, calib), dets in zip(frames, run_detection(cfg, model, frames)):
        path = out / f"{fid}.txt"
        rows = [detection_to_result_row(d.label, d.box, d.score, calib) for d in dets]
        path.write_text("".join(r + "\n" for r in rows))
        emit(fid, len(dets), path)
    return 0


COMMANDS = {
    "preprocess": (cmd_preprocess, "voxelize and rasterize frames into the cache"),
    "render-bev": (cmd_render_bev, "write the 3-channel BEV map of frames as PNG"),
    "build-gtdb": (cmd_build_gtdb, "collect per-object point crops for paste augmentation"),
    "train-toy": (cmd_train_toy, "train on the configured frames; writes loss log, checkpoint, loss curve"),
    "eval": (cmd_eval, "AP@R40 report for a checkpoint, with a precision/recall figure"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every network block"),
    "infer": (cmd_infer, "write KITTI result files for a checkpoint"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pvssd", description="Two-branch LiDAR 3D detector toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration (default: toy preset)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--frames", help="comma-separated frame ids, or @file with one id per line")
        p.add_argument("--out", help="output directory (or .png file for render-bev)")
        p.add_argument("--checkpoint", help="checkpoint directory")
        p.add_argument("--split", choices=SPLITS, default="val" if name in ("eval", "infer") else "train")
        if name == "train-toy":
            p.add_argument("--steps", type=int, help="override train.steps")
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        cfg = resolve_config(args)
        return fn(args, cfg)
    except ConfigError as exc:
        print(f"pvssd: error command={args.command} kind=config message={exc}", file=sys.stderr)
        return 2
    except (KittiFormatError, FileNotFoundError, TrainingError, ValueError, KeyError, OSError) as exc:
        print(f"pvssd: error command={args.command} kind={type(exc).__name__} message={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
