"""Evaluation over a test split, with per-round curves."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..datagen import Episode
from ..model import Policy, strip_reasoning
from ..refine import InferConfig, RefineResult, combined_score, refine_batch
from .judge import Judge, TemplateJudge
from .metrics import detect_accuracy, rouge_l


@dataclass
class RoundPoint:
    round: int
    H_det: float
    H_reason: float
    C: float
    detect_acc: float
    judge_score: Optional[float]


@dataclass
class MetricsReport:
    detect_acc: float
    rouge_l: Optional[float]
    judge_score: Optional[float]
    n_episodes: int
    n_with_reasoning: int
    n_unscored: int
    mean_stop_round: float
    curves: list[RoundPoint] = field(default_factory=list)

    def __post_init__(self):
        for name in ("detect_acc", "rouge_l", "judge_score"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["curves"] = [RoundPoint(**p) for p in d.get("curves", [])]
        return cls(**d)


def _judge_all(judge: Judge, outs, episodes, vocab) -> tuple[list[float], int]:
    scores, unscored = [], 0
    for o, ep in zip(outs, episodes):
        if ep.reasoning is None:
            continue
        cand = vocab.decode(strip_reasoning(o.reasoning))
        s = judge.score(cand, list(ep.reasoning), ep.episode_id)
        if s is None:
            unscored += 1
        else:
            scores.append(s)
    return scores, unscored


def evaluate_results(
    results: Sequence[RefineResult],
    episodes: Sequence[Episode],
    vocab,
    judge: Judge | None = None,
    lam: float = 0.1,
) -> MetricsReport:
    if len(results) != len(episodes):
        raise ValueError("results and episodes differ in length")
    if not episodes:
        raise ValueError("empty test set")
    judge = judge or TemplateJudge()
    labels = [ep.label for ep in episodes]
    finals = [r.output for r in results]
    acc = detect_accuracy([o.det_label for o in finals], labels)
    with_reason = [(o, ep) for o, ep in zip(finals, episodes) if ep.reasoning is not None]
    rouge = None
    if with_reason:
        rouge = float(np.mean([rouge_l(vocab.decode(strip_reasoning(o.reasoning)), list(ep.reasoning)) for o, ep in with_reason]))
    scores, unscored = _judge_all(judge, finals, episodes, vocab)
    curves = []
    max_stop = max(r.stop_round for r in results)
    for t in range(1, max_stop + 1):
        outs = [r.round_choice(t) for r in results]
        rs, _ = _judge_all(judge, outs, episodes, vocab)
        curves.append(
            RoundPoint(
                round=t - 1,
                H_det=float(np.mean([o.H_det for o in outs])),
                H_reason=float(np.mean([o.H_reason for o in outs])),
                C=float(np.mean([combined_score(o, lam) for o in outs])),
                detect_acc=detect_accuracy([o.det_label for o in outs], labels),
                judge_score=float(np.mean(rs)) if rs else None,
            )
        )
    return MetricsReport(
        detect_acc=acc,
        rouge_l=rouge,
        judge_score=float(np.mean(scores)) if scores else None,
        n_episodes=len(episodes),
        n_with_reasoning=len(with_reason),
        n_unscored=unscored,
        mean_stop_round=float(np.mean([r.stop_round for r in results])),
        curves=curves,
    )


def run_eval(
    policy: Policy,
    episodes: Sequence[Episode],
    cfg: InferConfig = InferConfig(),
    judge: Judge | None = None,
    chunk: int = 100,
) -> tuple[MetricsReport, list[RefineResult]]:
    """Refine every episode and score the outputs overall and per round.

    Round ``k`` of the curves is the ``k``-th refinement (0 = unconditioned).
    """
    results: list[RefineResult] = []
    for start in range(0, len(episodes), chunk):
        part = episodes[start : start + chunk]
        results.extend(refine_batch([ep.frames for ep in part], policy, cfg, [ep.episode_id for ep in part]))
    return evaluate_results(results, episodes, policy.vocab, judge, cfg.lam), results
