"""Command-line entry point: ``fadm <command> [options]``.

Commands: synth-data, train, refine, rectify-video, evaluate, report.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .coarse import count_frames, frame_name, load_all, read_image, to_uint8, write_image
from .config import (
    ABLATIONS, Config, ConfigError, data_root, dump_config, explicit, get_dotted, load_config, set_dotted,
)
from .dataset import generate_corpus, list_sequences, load_split, pairs_to_tensors, tensor_to_frames
from .experiment import set_deterministic
from .face3d import SidecarProvider
from .metrics import evaluate_frames
from .pipeline import eval_subset, rectify_video, refine_dataset
from .training import Trainer, appearance_gap, load_checkpoint, schedule_from, write_log_line

log = logging.getLogger("fadm")


class UsageError(Exception):
    pass


# -- config plumbing ------------------------------------------------------------

def resolve_config(args, flag_targets: dict) -> Config:
    """Load --config and apply flags; a flag that contradicts an explicit config
    value is an error unless --override is given."""
    cfg, raw = load_config(args.config)
    for flag, dotted in flag_targets.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        current = get_dotted(cfg, dotted)
        if explicit(raw, dotted) and current != value and not args.override:
            raise ConfigError(
                f"--{flag.replace('_', '-')}={value!r} conflicts with {dotted}={current!r} in "
                f"{args.config}; pass --override to let the flag win"
            )
        set_dotted(cfg, dotted, value)
    return cfg.validate()


def content_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            rel = f.relative_to(p) if p.is_dir() else Path(f.name)
            h.update(str(rel).encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: Config, seed, inputs: list) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "seed": seed,
        "config": cfg.to_dict(),
        "inputs": [str(p) for p in inputs if p is not None],
        "input_hash": content_hash(*inputs),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    dump_config(cfg, out_dir / "config.yaml")


def require(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required for this command")
    return Path(path)


def corpus_dir(args) -> Path:
    if args.input_dir is not None:
        return Path(args.input_dir)
    root = data_root()
    if root is None:
        raise UsageError("--input-dir is required (or set FADM_DATA_ROOT)")
    return root


def load_nets(args, cfg: Config):
    nets, _ = load_checkpoint(require(args.checkpoint, "--checkpoint"), cfg)
    return nets


# -- commands -------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = resolve_config(args, {"seed": "data.seed"})
    out = Path(args.output_dir) if args.output_dir else data_root()
    if out is None:
        raise UsageError("--output-dir is required (or set FADM_DATA_ROOT)")
    index = generate_corpus(cfg, out)
    write_manifest(out, "synth-data", cfg, cfg.data.seed, [args.config])
    log.info("wrote %d sequences to %s", len(index["sequences"]), out)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args, {"seed": "train.seed", "ablation": "train.ablation", "steps": "train.steps"})
    corpus = corpus_dir(args)
    out = require(args.output_dir, "--output-dir")
    set_deterministic()
    write_manifest(out, "train", cfg, cfg.train.seed, [args.config, corpus])
    data = load_split(corpus, cfg, "train")
    if data is None:
        raise UsageError(f"no training pairs found under {corpus}")
    if args.checkpoint:
        trainer = Trainer.resume(args.checkpoint, data, cfg)
    else:
        trainer = Trainer(cfg, data)
    log_path = out / "train_log.jsonl"
    if not args.checkpoint:
        log_path.write_text("")

    def on_record(rec):
        write_log_line(log_path, rec)
        if rec["step"] % 50 == 0:
            log.info("step %d total %.5f", rec["step"], rec["total"])

    remaining = cfg.total_steps(len(data)) - trainer.step
    trainer.run(max(0, remaining), log=on_record, checkpoint=lambda tr: tr.save(out / f"ckpt_{tr.step:06d}.pt"))
    trainer.save(out / "final.pt")
    log.info("saved %s", out / "final.pt")
    return 0


def _refine_kw(cfg: Config) -> dict:
    return {"ablation": cfg.train.ablation, "sampler": cfg.diffusion.sampler, "ddim_steps": cfg.diffusion.ddim_steps,
            "clip_denoised": cfg.diffusion.clip_denoised}


def video_dirs(root: Path) -> list:
    if count_frames(root):
        return [root]
    train, held = list_sequences(root)
    return [root / n for n in train + held]


def cmd_refine(args) -> int:
    cfg = resolve_config(args, {"seed": "eval.sample_seed", "ablation": "train.ablation"})
    src = corpus_dir(args)
    out = require(args.output_dir, "--output-dir")
    set_deterministic()
    nets = load_nets(args, cfg)
    write_manifest(out, "refine", cfg, cfg.eval.sample_seed, [args.config, args.checkpoint, src])
    for vdir in video_dirs(src):
        pairs = load_all(vdir, resolution=cfg.data.resolution, exp_dim=cfg.data.exp_dim, pose_dim=cfg.data.pose_dim)
        data = pairs_to_tensors(pairs)
        refined = refine_dataset(data, nets, schedule_from(cfg), cfg.eval.sample_seed,
                                 batch_size=cfg.eval.batch_size, **_refine_kw(cfg))
        dest = out / vdir.relative_to(src) / "refined" if vdir != src else out / "refined"
        for i, f in enumerate(tensor_to_frames(refined)):
            write_image(dest / frame_name(i, "png"), f)
        log.info("refined %d frames -> %s", len(pairs), dest)
    return 0


def cmd_rectify_video(args) -> int:
    cfg = resolve_config(args, {"seed": "eval.sample_seed", "ablation": "train.ablation"})
    src = corpus_dir(args)
    out = require(args.output_dir, "--output-dir")
    set_deterministic()
    nets = load_nets(args, cfg)
    frames_dir = src / "coarse" if (src / "coarse").is_dir() else src / "frames"
    n = 0
    while (frames_dir / frame_name(n, "png")).is_file():
        n += 1
    frames = [read_image(frames_dir / frame_name(i, "png"), cfg.data.resolution) for i in range(n)]
    provider = SidecarProvider(src / "states", cfg.data.exp_dim, cfg.data.pose_dim)
    write_manifest(out, "rectify-video", cfg, cfg.eval.sample_seed, [args.config, args.checkpoint, src])
    refined = rectify_video(frames, nets, schedule_from(cfg), cfg.eval.sample_seed, provider,
                            batch_size=cfg.eval.batch_size, **_refine_kw(cfg))
    for i, f in enumerate(refined):
        write_image(out / "refined" / frame_name(i, "png"), f)
    log.info("rectified %d frames -> %s", len(refined), out / "refined")
    return 0


def _png_map(root: Path) -> dict:
    return {str(p.relative_to(root)): p for p in sorted(root.rglob("*.png"))}


def _write_report(out: Path, report: dict, rows: list) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    if rows:
        with open(out / "per_frame.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def cmd_evaluate(args) -> int:
    """Either compare two image trees (--input-dir vs --reference-dir), or, with
    --checkpoint, refine the held-out split of a corpus and score it."""
    cfg = resolve_config(args, {"seed": "eval.sample_seed", "ablation": "train.ablation"})
    out = require(args.output_dir, "--output-dir")
    src = corpus_dir(args)
    if args.checkpoint is None:
        ref_root = Path(args.reference_dir) if args.reference_dir else src
        preds, refs = _png_map(src), _png_map(ref_root)
        common = sorted(set(preds) & set(refs))
        if not common:
            raise UsageError(f"no matching PNG files between {src} and {ref_root}")
        p = [read_image(preds[k]) for k in common]
        r = [read_image(refs[k]) for k in common]
        report, rows = evaluate_frames(p, r)
        for row, key in zip(rows, common):
            row["index"] = key
        write_manifest(out, "evaluate", cfg, None, [args.config, src, ref_root])
        _write_report(out, report, rows)
        log.info("evaluated %d frame pairs", len(common))
        return 0

    set_deterministic()
    nets = load_nets(args, cfg)
    held = load_split(src, cfg, "heldout") or load_split(src, cfg, "train")
    subset = eval_subset(held, cfg.eval.n_pairs)
    refined = refine_dataset(subset, nets, schedule_from(cfg), cfg.eval.sample_seed,
                             batch_size=cfg.eval.batch_size, **_refine_kw(cfg))
    truth = tensor_to_frames(subset.driving)
    report, rows = evaluate_frames(tensor_to_frames(refined), truth)
    coarse_report, _ = evaluate_frames(tensor_to_frames(subset.coarse), truth)
    full = {"refined": report, "coarse": coarse_report,
            "appearance_gap": appearance_gap(nets, subset)}
    for row, key in zip(rows, subset.keys):
        row["index"] = f"{key[0]}/{key[1]}" if isinstance(key, tuple) else key
    write_manifest(out, "evaluate", cfg, cfg.eval.sample_seed, [args.config, args.checkpoint, src])
    _write_report(out, full, rows)
    log.info("refined PSNR %.3f dB vs coarse %.3f dB", report["psnr"]["mean"], coarse_report["psnr"]["mean"])
    return 0


def cmd_report(args) -> int:
    """Side-by-side grid: source | driving | coarse | refined | truth, one row per pair."""
    cfg = resolve_config(args, {"seed": "eval.sample_seed", "ablation": "train.ablation"})
    src = corpus_dir(args)
    out = require(args.output_dir, "--output-dir")
    set_deterministic()
    nets = load_nets(args, cfg)
    held = load_split(src, cfg, "heldout") or load_split(src, cfg, "train")
    subset = eval_subset(held, args.rows)
    refined = refine_dataset(subset, nets, schedule_from(cfg), cfg.eval.sample_seed,
                             batch_size=cfg.eval.batch_size, **_refine_kw(cfg))
    cols = [subset.source, subset.driving, subset.coarse, refined, subset.driving]
    rows = [np.concatenate([tensor_to_frames(c[i:i + 1])[0] for c in cols], axis=1) for i in range(len(subset))]
    grid = np.concatenate(rows, axis=0)
    write_manifest(out, "report", cfg, cfg.eval.sample_seed, [args.config, args.checkpoint, src])
    write_image(out / "report.png", to_uint8(grid))
    (out / "report_columns.txt").write_text("source driving coarse refined truth\n")
    log.info("wrote %s", out / "report.png")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "refine": cmd_refine,
    "rectify-video": cmd_rectify_video,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fadm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--input-dir", type=Path)
        p.add_argument("--output-dir", type=Path)
        p.add_argument("--ablation", choices=ABLATIONS)
        p.add_argument("--override", action="store_true", help="let flags win over config values")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--steps", type=int, help="optimizer steps (overrides epochs)")
        if name == "evaluate":
            p.add_argument("--reference-dir", type=Path)
        if name == "report":
            p.add_argument("--rows", type=int, default=6)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError, ValueError, LookupError) as e:
        print(f"fadm {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
