"""Text tables, JSON files and matplotlib figures for evaluation reports."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import VARIANT_LABELS  # noqa: E402
from .runner import MetricsReport  # noqa: E402


def _fmt(v: Optional[float]) -> str:
    return "  n/a" if v is None else f"{v:.3f}"


def _ms(cell) -> str:
    if cell is None:
        return "      n/a      "
    return f"{cell['mean']:.3f} ± {cell['std']:.3f}"


def metrics_table(rep: MetricsReport) -> str:
    lines = [
        f"episodes {rep.n_episodes}  with reasoning {rep.n_with_reasoning}  unscored {rep.n_unscored}",
        f"detect_acc {_fmt(rep.detect_acc)}  judge {_fmt(rep.judge_score)}  rouge_l {_fmt(rep.rouge_l)}  mean stop round {rep.mean_stop_round:.2f}",
        "round   H_det    H_reason  C        detect  judge",
    ]
    for p in rep.curves:
        lines.append(f"{p.round:<7d} {p.H_det:.5f}  {p.H_reason:.5f}   {p.C:.5f}  {_fmt(p.detect_acc)}   {_fmt(p.judge_score)}")
    return "\n".join(lines)


def ablation_table(report: dict) -> str:
    lines = [f"{'variant':<24} {'detection':<15}  {'reasoning (judge)':<15}  rouge_l"]
    for v in report["variants"]:
        row = report["table"][v]
        lines.append(f"{VARIANT_LABELS.get(v, v):<24} {_ms(row['detect_acc'])}  {_ms(row['judge_score'])}    {_ms(row['rouge_l'])}")
    if report.get("round_curves"):
        lines.append("")
        lines.append("round  judge            C")
        for r in report["round_curves"]:
            lines.append(f"{r['round']:<6d} {_ms(r['judge_score'])}  {_ms(r['C'])}")
    return "\n".join(lines)


def ratio_table(report: dict) -> str:
    keys = list(report["table"])
    head = "sparse:dense   " + "".join(f"{k:>17}" for k in keys)
    det = "detection      " + "".join(f"{_ms(report['table'][k]['detect_acc']):>17}" for k in keys)
    rea = "reasoning      " + "".join(f"{_ms(report['table'][k]['judge_score']):>17}" for k in keys)
    return "\n".join([head, det, rea])


def write_json(obj, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def plot_round_curves(points: list[dict], path: Path | str, title: str = "refinement rounds") -> Path:
    """``points``: rows with round and per-quantity values (plain or mean/std dicts)."""

    def get(row, q):
        v = row.get(q)
        if isinstance(v, dict):
            return v["mean"], v["std"]
        return (float("nan"), 0.0) if v is None else (v, 0.0)

    rounds = [p["round"] for p in points]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for q, ax in (("judge_score", axes[0]), ("C", axes[1])):
        m, s = zip(*(get(p, q) for p in points)) if points else ((), ())
        ax.errorbar(rounds, m, yerr=s, marker="o", capsize=3)
        ax.set_xlabel("round")
        ax.set_ylabel(q)
        ax.set_xticks(rounds)
    axes[0].set_title("reasoning judge score")
    axes[1].set_title("combined entropy")
    fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_ablation(report: dict, path: Path | str) -> Path:
    vs = report["variants"]
    x = range(len(vs))
    fig, ax = plt.subplots(figsize=(8, 3.8))
    for off, metric, name in ((-0.2, "detect_acc", "detection"), (0.2, "judge_score", "reasoning")):
        m = [report["table"][v][metric]["mean"] if report["table"][v][metric] else 0.0 for v in vs]
        s = [report["table"][v][metric]["std"] if report["table"][v][metric] else 0.0 for v in vs]
        ax.bar([i + off for i in x], m, width=0.4, yerr=s, capsize=3, label=name)
    ax.set_xticks(list(x))
    ax.set_xticklabels([VARIANT_LABELS.get(v, v) for v in vs], rotation=15, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_ratio(report: dict, path: Path | str) -> Path:
    keys = list(report["table"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for metric, name in (("detect_acc", "detection"), ("judge_score", "reasoning")):
        m = [report["table"][k][metric]["mean"] for k in keys]
        s = [report["table"][k][metric]["std"] for k in keys]
        ax.errorbar(keys, m, yerr=s, marker="o", capsize=3, label=name)
    ax.set_xlabel("sparse:dense ratio")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
