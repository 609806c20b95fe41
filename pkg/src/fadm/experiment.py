"""Train-then-evaluate runs on a synthetic corpus."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .config import Config
from .dataset import load_split
from .pipeline import compare, eval_subset, refine_dataset
from .training import Trainer, appearance_gap, schedule_from, write_log_line

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    records: list
    gap_before: float
    gap_after: float
    metrics: dict = field(default_factory=dict)
    trainer: Optional[Trainer] = None

    def summary(self) -> dict:
        first = [r["total"] for r in self.records[:10]]
        last = [r["total"] for r in self.records[-10:]]
        return {
            "steps": len(self.records),
            "first10_total": sum(first) / max(len(first), 1),
            "last10_total": sum(last) / max(len(last), 1),
            "appearance_gap_before": self.gap_before,
            "appearance_gap_after": self.gap_after,
            **{k: v for k, v in self.metrics.items() if k != "rows"},
        }


def set_deterministic() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def run(
    cfg: Config,
    corpus: Path,
    out_dir: Optional[Path] = None,
    evaluate: bool = True,
    steps: Optional[int] = None,
) -> RunResult:
    set_deterministic()
    train = load_split(corpus, cfg, "train")
    held = load_split(corpus, cfg, "heldout") or train
    trainer = Trainer(cfg, train)
    gap_before = appearance_gap(trainer.nets, held)

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")

    def log_record(rec):
        if log_path is not None:
            write_log_line(log_path, rec)
        if rec["step"] % 100 == 0:
            log.info("step %d total %.5f L_d %.5f L_color %.5f", rec["step"], rec["total"], rec["L_d"], rec["L_color"])

    def ckpt(tr):
        tr.save(out_dir / f"ckpt_{tr.step:06d}.pt")

    n_steps = cfg.total_steps(len(train)) if steps is None else steps
    records = trainer.run(n_steps, log=log_record, checkpoint=ckpt if out_dir is not None else None)
    if out_dir is not None:
        trainer.save(out_dir / "final.pt")
    gap_after = appearance_gap(trainer.nets, held)

    metrics = {}
    if evaluate:
        subset = eval_subset(held, cfg.eval.n_pairs)
        refined = refine_dataset(
            subset, trainer.nets, schedule_from(cfg), cfg.eval.sample_seed,
            batch_size=cfg.eval.batch_size, ablation=cfg.train.ablation,
            sampler=cfg.diffusion.sampler, ddim_steps=cfg.diffusion.ddim_steps,
            clip_denoised=cfg.diffusion.clip_denoised,
        )
        metrics = compare(refined, subset)
        metrics["refined"] = refined
    result = RunResult(records, gap_before, gap_after, metrics, trainer)
    if out_dir is not None:
        (out_dir / "summary.json").write_text(
            json.dumps({k: v for k, v in result.summary().items() if k != "refined"}, indent=2)
        )
    return result
