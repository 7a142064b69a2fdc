"""The refinement process: state transitions, training rollouts and
entropy-guided multi-trajectory inference with tolerance-based stopping."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import ROUND0, ConditioningContext, RoundOutput, strip_reasoning
from .vocab import DEFAULT_VOCAB

SELECT_MODES = ("final", "global_min")


@dataclass(frozen=True, eq=False)
class RefineState:
    """[x, previous detection, previous reasoning, prompt] at a given round."""

    frames: np.ndarray
    prev: Optional[tuple[str, tuple[int, ...]]] = None
    round: int = 0

    def __post_init__(self):
        if (self.round == 0) != (self.prev is None):
            raise ValueError("round 0 must have no previous outputs, later rounds must have them")

    def context(self) -> ConditioningContext:
        if self.prev is None:
            return ROUND0
        label, reasoning = self.prev
        return ConditioningContext(label, reasoning, "both")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RefineState):
            return NotImplemented
        return self.round == other.round and self.prev == other.prev and np.array_equal(self.frames, other.frames)

    __hash__ = None


def transition(state: RefineState, action: RoundOutput) -> RefineState:
    """Deterministic: keep the frames, record the action as the previous outputs."""
    return RefineState(state.frames, (action.det_label, strip_reasoning(action.reasoning)), state.round + 1)


def combined_score(out: RoundOutput, lam: float) -> float:
    return out.H_det + lam * out.H_reason


@dataclass(frozen=True)
class InferConfig:
    M: int = 3
    T_refine: int = 4
    eps: float = 1e-4
    lam: float = 0.1
    temperature: float = 0.7
    seed: int = 0
    select: str = "final"

    def __post_init__(self):
        if self.M < 1 or self.T_refine < 1:
            raise ValueError("M and T_refine must be at least 1")
        if self.eps < 0 or self.lam < 0:
            raise ValueError("eps and lam must be non-negative")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.select not in SELECT_MODES:
            raise ValueError(f"select must be one of {SELECT_MODES}")


@dataclass
class Trajectory:
    rounds: list[RoundOutput] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)


@dataclass
class RefineResult:
    det_label: str
    reasoning: tuple[int, ...]
    trajectories: list[Trajectory]
    best_per_round: list[int]
    stop_round: int
    selected: int
    selected_round: int
    broke: bool

    @property
    def output(self) -> RoundOutput:
        return self.trajectories[self.selected].rounds[self.selected_round - 1]

    def round_choice(self, r: int) -> RoundOutput:
        """Argmin trajectory output of round ``r`` (1-based), held at the stop round beyond it."""
        r = min(r, self.stop_round)
        return self.trajectories[self.best_per_round[r - 1]].rounds[r - 1]

    def to_dict(self, vocab=DEFAULT_VOCAB) -> dict:
        return {
            "det_label": self.det_label,
            "reasoning": vocab.decode(self.reasoning),
            "stop_round": self.stop_round,
            "selected_trajectory": self.selected,
            "selected_round": self.selected_round,
            "broke": self.broke,
            "best_per_round": self.best_per_round,
            "trajectories": [
                [
                    {
                        "round": t + 1,
                        "det_prob": r.det_prob,
                        "det_label": r.det_label,
                        "reasoning": vocab.decode(r.reasoning),
                        "H_det": r.H_det,
                        "H_reason": r.H_reason,
                        "C": traj.scores[t],
                    }
                    for t, r in enumerate(traj.rounds)
                ]
                for traj in self.trajectories
            ],
        }


def trajectory_seeds(seed: int, key: int | str, M: int) -> list[int]:
    """Independent per-trajectory seeds for one episode."""
    if isinstance(key, str):
        key = zlib.crc32(key.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(key)])
    return [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(M)]


def rollout_training(frames, policy, T: int, temperature: float, rngs) -> list[list[tuple[ConditioningContext, RoundOutput]]]:
    """Roll a batch forward for ``T`` rounds, each conditioned on the previous round's sample.

    Returns, per sample, the ``T`` (context, output) pairs in round order.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if T < 1:
        raise ValueError("T must be at least 1")
    B = frames.shape[0]
    contexts = [ROUND0] * B
    history: list[list[tuple[ConditioningContext, RoundOutput]]] = [[] for _ in range(B)]
    for _ in range(T):
        outs = policy.predict_batch(frames, contexts, temperature, rngs)
        for i, o in enumerate(outs):
            history[i].append((contexts[i], o))
        contexts = [o.next_context() for o in outs]
    return history


def rollout_contexts(frames, policy, T: int, temperature: float, rngs) -> list[list[ConditioningContext]]:
    """The ``T`` per-round conditioning contexts a rollout visits (round-major).

    Equivalent to the contexts of ``rollout_training`` but skips sampling the
    final round, whose outputs never condition anything.
    """
    B = np.asarray(frames).shape[0]
    rounds = [[ROUND0] * B]
    for _ in range(T - 1):
        outs = policy.predict_batch(frames, rounds[-1], temperature, rngs)
        rounds.append([o.next_context() for o in outs])
    return rounds


def refine_batch(frames_list, policy, cfg: InferConfig, keys: Sequence[int | str]) -> list[RefineResult]:
    """Run the refinement loop for many episodes at once.

    All active trajectories of all still-running episodes are advanced
    together; each episode applies the stopping rule on its own.
    """
    frames_list = [np.asarray(f, dtype=np.float64) for f in frames_list]
    N, M = len(frames_list), cfg.M
    rngs = [[np.random.default_rng(s) for s in trajectory_seeds(cfg.seed, k, M)] for k in keys]
    trajs = [[Trajectory() for _ in range(M)] for _ in range(N)]
    contexts = [[ROUND0] * M for _ in range(N)]
    c_min = [math.inf] * N
    best = [(0, 0)] * N
    best_per_round: list[list[int]] = [[] for _ in range(N)]
    final: list[Optional[tuple[int, int, bool]]] = [None] * N
    active = list(range(N))
    for t in range(1, cfg.T_refine + 1):
        if not active:
            break
        frames = np.stack([frames_list[e] for e in active for _ in range(M)])
        ctx = [contexts[e][m] for e in active for m in range(M)]
        rg = [rngs[e][m] for e in active for m in range(M)]
        outs = policy.predict_batch(frames, ctx, cfg.temperature, rg)
        still = []
        for j, e in enumerate(active):
            scores = []
            for m in range(M):
                o = outs[j * M + m]
                c = combined_score(o, cfg.lam)
                trajs[e][m].rounds.append(o)
                trajs[e][m].scores.append(c)
                contexts[e][m] = o.next_context()
                scores.append(c)
            m_star = int(np.argmin(scores))
            best_per_round[e].append(m_star)
            c_star = scores[m_star]
            if c_min[e] != math.inf and c_star >= c_min[e] - cfg.eps:
                final[e] = (t, m_star, True)
                continue
            c_min[e] = c_star
            best[e] = (t, m_star)
            if t == cfg.T_refine:
                final[e] = (t, m_star, False)
            else:
                still.append(e)
        active = still
    results = []
    for e in range(N):
        stop, m_star, broke = final[e]
        if cfg.select == "global_min" and broke:
            sel_round, sel = best[e]
        else:
            sel_round, sel = stop, m_star
        out = trajs[e][sel].rounds[sel_round - 1]
        results.append(
            RefineResult(
                det_label=out.det_label,
                reasoning=out.reasoning,
                trajectories=trajs[e],
                best_per_round=best_per_round[e],
                stop_round=stop,
                selected=sel,
                selected_round=sel_round,
                broke=broke,
            )
        )
    return results


def refine_inference(frames, policy, cfg: InferConfig = InferConfig(), key: int | str = 0) -> RefineResult:
    """Refine one episode: M trajectories in lockstep, stop when the best
    combined entropy fails to drop by more than ``eps``, return the current
    round's best trajectory output."""
    return refine_batch([frames], policy, cfg, [key])[0]
