"""Ablation grid and sparse:dense ratio sweep over several seeds."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..datagen import DatasetManifest, generate_dataset
from ..model import ModelConfig
from ..refine import InferConfig
from ..train import TrainConfig, run_training
from .judge import TemplateJudge
from .runner import MetricsReport, run_eval

# display order of the ablation table
VARIANTS = ("multitask_only", "refinement_only", "offline_only", "online_only", "full")
VARIANT_LABELS = {
    "multitask_only": "Multitask",
    "refinement_only": "Refinement only",
    "offline_only": "Offline imitation only",
    "online_only": "Online imitation only",
    "full": "Full (all stages)",
}
RATIOS = (2, 5, 10, 30)
DEFAULT_SEEDS = (0, 1, 2, 3)


def inference_for(variant: str, base: InferConfig) -> InferConfig:
    """The multitask variant predicts once; every other variant refines."""
    if variant == "multitask_only":
        return replace(base, M=1, T_refine=1)
    return base


def training_key(variant: str) -> str:
    # multitask_only and refinement_only train identically
    return "multitask_only" if variant == "refinement_only" else variant


@dataclass
class CellResult:
    variant: str
    seed: int
    ratio: float
    report: MetricsReport
    checkpoint_sha256: str
    train_seconds: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = self.report.to_dict()
        return d


def _train_and_eval(job) -> list[CellResult]:
    """Train one configuration and evaluate it for each variant sharing it."""
    manifest, train_cfg, model_cfg, infer_cfg, variants, out_dir, ratio = job
    data = generate_dataset(manifest)
    t0 = time.perf_counter()
    ckpt_dir = None if out_dir is None else Path(out_dir)
    res = run_training(train_cfg, data, ckpt_dir, model_cfg)
    secs = time.perf_counter() - t0
    sha = res.policy.params.checksum()
    cells = []
    for v in variants:
        rep, _ = run_eval(res.policy, data["test"], inference_for(v, infer_cfg), TemplateJudge())
        cells.append(CellResult(v, train_cfg.seed, ratio, rep, sha, secs))
    return cells


def _run_jobs(jobs, workers: int) -> list[CellResult]:
    if workers <= 1:
        out = [c for job in jobs for c in _train_and_eval(job)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = [c for cells in pool.map(_train_and_eval, jobs) for c in cells]
    return out


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))


@dataclass
class Campaign:
    """Everything needed to reproduce the ablation table and ratio sweep."""

    seeds: Sequence[int] = DEFAULT_SEEDS
    manifest: DatasetManifest = field(default_factory=DatasetManifest)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    ratios: Sequence[float] = RATIOS
    variants: Sequence[str] = VARIANTS


def ablation_jobs(c: Campaign, out_dir: Optional[Path] = None):
    jobs = []
    for seed in c.seeds:
        man = replace(c.manifest, seed=seed)
        groups: dict[str, list[str]] = {}
        for v in c.variants:
            groups.setdefault(training_key(v), []).append(v)
        for key, vs in groups.items():
            tc = replace(c.train, seed=seed, ablation=key)
            sub = None if out_dir is None else out_dir / "checkpoints" / f"{key}_seed{seed}"
            jobs.append((man, tc, c.model, c.infer, vs, sub, man.ratio))
    return jobs


def ratio_jobs(c: Campaign, out_dir: Optional[Path] = None, skip_ratio: Optional[float] = None):
    jobs = []
    for seed in c.seeds:
        for r in c.ratios:
            if skip_ratio is not None and r == skip_ratio:
                continue
            man = c.manifest.with_ratio(r, sparse=c.manifest.counts["sparse"], test=c.manifest.counts["test"], seed=seed)
            tc = replace(c.train, seed=seed, ablation="full")
            sub = None if out_dir is None else out_dir / "checkpoints" / f"ratio{r:g}_seed{seed}"
            # cells carry the requested ratio; the realised one is rounded (2000/67)
            jobs.append((man, tc, c.model, c.infer, ["full"], sub, float(r)))
    return jobs


def summarize(cells: Sequence[CellResult], key) -> dict:
    """mean and population std of detection, judge and ROUGE-L per group."""
    groups: dict = {}
    for cell in cells:
        groups.setdefault(key(cell), []).append(cell)
    out = {}
    for k, cs in groups.items():
        row = {"n_seeds": len(cs)}
        for metric in ("detect_acc", "judge_score", "rouge_l"):
            vals = [getattr(c.report, metric) for c in cs if getattr(c.report, metric) is not None]
            row[metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))} if vals else None
        out[k] = row
    return out


def round_curve_summary(cells: Sequence[CellResult]) -> list[dict]:
    """Across seeds, mean and std of each per-round quantity.

    Seeds whose curves end early are carried forward at their last round.
    """
    if not cells:
        return []
    n = max(len(c.report.curves) for c in cells)
    out = []
    for r in range(n):
        pts = [c.report.curves[min(r, len(c.report.curves) - 1)] for c in cells]
        row = {"round": r}
        for q in ("H_det", "H_reason", "C", "detect_acc", "judge_score"):
            vals = [getattr(p, q) for p in pts if getattr(p, q) is not None]
            row[q] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))} if vals else None
        out.append(row)
    return out


def run_ablations(c: Campaign, out_dir: Path | str | None = None, workers: int = 1) -> dict:
    """Train and evaluate every ablation variant for every seed."""
    out_dir = None if out_dir is None else Path(out_dir)
    t0 = time.perf_counter()
    cells = _run_jobs(ablation_jobs(c, out_dir), workers)
    return {
        "grid": "ablation",
        "seeds": list(c.seeds),
        "variants": list(c.variants),
        "table": summarize(cells, lambda x: x.variant),
        "round_curves": round_curve_summary([x for x in cells if x.variant == "full"]),
        "cells": [x.to_dict() for x in cells],
        "wall_seconds": time.perf_counter() - t0,
    }


def run_ratio_sweep(c: Campaign, out_dir: Path | str | None = None, workers: int = 1, reuse: Sequence[CellResult] = ()) -> dict:
    """Train the full method at each sparse:dense ratio (sparse count fixed).

    ``reuse`` supplies already-computed full-method cells at the base ratio.
    """
    out_dir = None if out_dir is None else Path(out_dir)
    t0 = time.perf_counter()
    skip = reuse[0].ratio if reuse else None
    cells = list(reuse) + _run_jobs(ratio_jobs(c, out_dir, skip), workers)
    table = summarize(cells, lambda x: x.ratio)
    return {
        "grid": "ratio",
        "seeds": list(c.seeds),
        "ratios": list(c.ratios),
        "table": {f"{r:g}": table[r] for r in sorted(table)},
        "cells": [x.to_dict() for x in cells],
        "wall_seconds": time.perf_counter() - t0,
    }


def cells_from(report: dict) -> list[CellResult]:
    return [
        CellResult(d["variant"], d["seed"], d["ratio"], MetricsReport.from_dict(d["report"]), d["checkpoint_sha256"], d["train_seconds"])
        for d in report["cells"]
    ]


def campaign_to_dict(c: Campaign) -> dict:
    return {
        "seeds": list(c.seeds),
        "manifest": c.manifest.to_dict(),
        "train": asdict(c.train),
        "model": asdict(c.model),
        "infer": asdict(c.infer),
        "ratios": list(c.ratios),
        "variants": list(c.variants),
    }


def run_campaign(c: Campaign, out_dir: Path | str | None = None, workers: int = 1) -> dict:
    """Ablation grid followed by the ratio sweep, sharing the base-ratio cells."""
    t0 = time.perf_counter()
    abl = run_ablations(c, out_dir, workers)
    base = [x for x in cells_from(abl) if x.variant == "full"]
    rat = run_ratio_sweep(c, out_dir, workers, reuse=base)
    return {"campaign": campaign_to_dict(c), "ablation": abl, "ratio": rat, "wall_seconds": time.perf_counter() - t0, "workers": workers}
