"""Offline imitation (warm-up, expert-conditioned) and online refinement training."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .datagen import Episode
from .model import ROUND0, ConditioningContext, ModelConfig, Policy
from .refine import rollout_contexts
from .vocab import EOS

ABLATIONS = ("full", "multitask_only", "refinement_only", "offline_only", "online_only")
PHASES = ("warmup", "expert", "online")


@dataclass
class TrainConfig:
    offline_epochs: int = 3
    online_epochs: int = 10
    T: int = 3
    batch_size: int = 64
    lr_heads: float = 1e-3
    lr_encoder: float = 2e-4
    weight_decay: float = 0.1
    warmup_ratio: float = 0.03
    grad_clip: float = 1.0
    rollout_temperature: float = 1.0
    dense_oversample: int = 2
    expert_loss: str = "both"
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.expert_loss not in ("both", "masked_task"):
            raise ValueError("expert_loss must be 'both' or 'masked_task'")
        if min(self.offline_epochs, self.online_epochs) < 0:
            raise ValueError("epochs must be non-negative")
        if self.T < 1 or self.batch_size < 1 or self.dense_oversample < 1:
            raise ValueError("T, batch_size and dense_oversample must be positive")


def stage_plan(cfg: TrainConfig) -> list[tuple[str, int]]:
    """(phase, epochs) per stage. Ablations that drop stages hand their epochs
    to the remaining ones so every variant trains for the same total."""
    off, on = cfg.offline_epochs, cfg.online_epochs
    total = 2 * off + on
    if cfg.ablation == "full":
        plan = [("warmup", off), ("expert", off), ("online", on)]
    elif cfg.ablation in ("multitask_only", "refinement_only"):
        plan = [("warmup", total)]
    elif cfg.ablation == "offline_only":
        plan = [("warmup", off + math.ceil(on / 2)), ("expert", off + on // 2)]
    else:
        plan = [("online", total)]
    return [(p, e) for p, e in plan if e > 0]


@dataclass
class TrainRecord:
    step: int
    phase: str
    round: int
    loss_bce: float
    loss_ntp: Optional[float]
    lr: float
    dense_fraction: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class LossBreakdown:
    """Per-sample (per row, for online: round-major) loss pieces of one step."""

    bce: np.ndarray
    ntp: np.ndarray
    ntp_weight: np.ndarray
    rounds: np.ndarray
    dense: np.ndarray


def reasoning_target(ep: Episode, policy: Policy) -> Optional[list[int]]:
    if ep.reasoning is None:
        return None
    return policy.vocab.encode(list(ep.reasoning) + [EOS])


def _labels(batch: Sequence[Episode]) -> np.ndarray:
    return np.array([1.0 if ep.is_failure else 0.0 for ep in batch])


def _frames(batch: Sequence[Episode]) -> np.ndarray:
    return np.stack([ep.frames for ep in batch])


def _joint_loss(policy, frames, contexts, labels, targets, B, rng, bce_mask=None):
    """Sum of per-row losses divided by the batch size ``B``.

    Rows without a reasoning target contribute no NTP term at all.
    """
    bce, ntp, rows = policy.loss_terms(frames, contexts, labels, targets, training=True, rng=rng)
    n = len(contexts)
    bce_w = np.ones(n) if bce_mask is None else np.asarray(bce_mask, dtype=np.float64)
    loss = (bce * bce_w).sum() * (1.0 / B)
    ntp_full = np.zeros(n)
    weight = np.zeros(n)
    if ntp is not None:
        loss = loss + ntp.sum() * (1.0 / B)
        ntp_full[rows] = ntp.data
        weight[rows] = 1.0
    return loss, bce.data * bce_w, ntp_full, weight


class Trainer:
    """Holds the policy, optimizer state, schedule and log for one training run."""

    def __init__(self, cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(), policy: Policy | None = None):
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.policy = policy if policy is not None else Policy(model_cfg, seed=cfg.seed)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A17]))
        self.step = 0
        self.total_steps = 1
        self.records: list[TrainRecord] = []

    # ------------------------------------------------------------ schedule

    def lr_factor(self) -> float:
        return dc.cosine_schedule(self.step, self.total_steps, self.cfg.warmup_ratio)

    def _apply(self, loss: dc.Tensor) -> float:
        factor = self.lr_factor()
        loss.backward()
        lr = {"encoder": self.cfg.lr_encoder * factor, "heads": self.cfg.lr_heads * factor}
        dc.optimizer_step(self.policy.params, lr, self.cfg.weight_decay, clip_norm=self.cfg.grad_clip)
        self.step += 1
        return self.cfg.lr_heads * factor

    def _log(self, phase, bd: LossBreakdown, lr, n_rounds=1):
        for r in range(1, n_rounds + 1):
            sel = bd.rounds == r
            dense = sel & (bd.ntp_weight > 0)
            self.records.append(
                TrainRecord(
                    step=self.step - 1,
                    phase=phase,
                    round=r,
                    loss_bce=float(bd.bce[sel].mean()),
                    loss_ntp=float(bd.ntp[dense].mean()) if dense.any() else None,
                    lr=lr,
                    dense_fraction=float(bd.dense[sel].mean()),
                )
            )

    # ------------------------------------------------------------ losses

    def warmup_loss(self, batch: Sequence[Episode]):
        if not batch:
            raise ValueError("empty batch")
        pol = self.policy
        targets = [reasoning_target(ep, pol) for ep in batch]
        loss, bce, ntp, w = _joint_loss(pol, _frames(batch), [ROUND0] * len(batch), _labels(batch), targets, len(batch), self.rng)
        dense = np.array([t is not None for t in targets], dtype=float)
        return loss, LossBreakdown(bce, ntp, w, np.ones(len(batch), dtype=int), dense)

    def expert_contexts(self, batch: Sequence[Episode], rng: np.random.Generator):
        """Ground-truth contexts with one task's input masked per sample.

        Returns the contexts and the selected task per sample ("detect" or
        "reason"). The selected task's own ground truth is hidden.
        """
        contexts, tasks = [], []
        for ep in batch:
            if ep.reasoning is None:
                raise ValueError(f"expert-conditioned stage needs dense episodes, got sparse {ep.episode_id}")
            gt_reason = tuple(self.policy.vocab.encode(ep.reasoning))
            task = "detect" if rng.integers(2) == 0 else "reason"
            if task == "detect":
                contexts.append(ConditioningContext("none", gt_reason, "both"))
            else:
                contexts.append(ConditioningContext(ep.label, None, "both"))
            tasks.append(task)
        return contexts, tasks

    def expert_loss(self, batch: Sequence[Episode]):
        if not batch:
            raise ValueError("empty batch")
        pol = self.policy
        contexts, tasks = self.expert_contexts(batch, self.rng)
        targets = [reasoning_target(ep, pol) for ep in batch]
        bce_mask = None
        if self.cfg.expert_loss == "masked_task":
            bce_mask = [1.0 if t == "detect" else 0.0 for t in tasks]
            targets = [tg if t == "reason" else None for tg, t in zip(targets, tasks)]
        loss, bce, ntp, w = _joint_loss(pol, _frames(batch), contexts, _labels(batch), targets, len(batch), self.rng, bce_mask)
        dense = np.ones(len(batch))
        return loss, LossBreakdown(bce, ntp, w, np.ones(len(batch), dtype=int), dense)

    def online_loss(self, batch: Sequence[Episode], contexts_by_round=None):
        """Accumulated T-round loss on the current policy's own rollouts.

        ``contexts_by_round`` replays recorded contexts instead of sampling.
        """
        if not batch:
            raise ValueError("empty batch")
        pol, T, B = self.policy, self.cfg.T, len(batch)
        frames = _frames(batch)
        if contexts_by_round is None:
            seeds = self.rng.integers(0, 2**63 - 1, size=B)
            rngs = [np.random.default_rng(int(s)) for s in seeds]
            contexts_by_round = rollout_contexts(frames, pol, T, self.cfg.rollout_temperature, rngs)
        contexts = [c for rnd in contexts_by_round for c in rnd]
        targets = [reasoning_target(ep, pol) for ep in batch] * T
        labels = np.tile(_labels(batch), T)
        loss, bce, ntp, w = _joint_loss(pol, np.tile(frames, (T, 1, 1)), contexts, labels, targets, B, self.rng)
        rounds = np.repeat(np.arange(1, T + 1), B)
        dense = np.array([t is not None for t in targets], dtype=float)
        self._last_contexts = contexts_by_round
        return loss, LossBreakdown(bce, ntp, w, rounds, dense)

    # ------------------------------------------------------------ steps

    def warmup_step(self, batch):
        loss, bd = self.warmup_loss(batch)
        lr = self._apply(loss)
        self._log("warmup", bd, lr)
        return bd

    def expert_conditioned_step(self, batch):
        loss, bd = self.expert_loss(batch)
        lr = self._apply(loss)
        self._log("expert", bd, lr)
        return bd

    def online_step(self, batch):
        loss, bd = self.online_loss(batch)
        lr = self._apply(loss)
        self._log("online", bd, lr, self.cfg.T)
        return bd

    # ------------------------------------------------------------ epochs

    def phase_pool(self, phase: str, sparse: Sequence[Episode], dense: Sequence[Episode]) -> list[Episode]:
        if phase == "warmup":
            return list(sparse) + list(dense)
        if phase == "expert":
            return list(dense)
        return list(sparse) + list(dense) * self.cfg.dense_oversample

    def steps_per_epoch(self, phase, sparse, dense) -> int:
        return math.ceil(len(self.phase_pool(phase, sparse, dense)) / self.cfg.batch_size)

    def run_epoch(self, phase: str, sparse, dense) -> None:
        pool = self.phase_pool(phase, sparse, dense)
        if not pool:
            raise ValueError(f"no episodes available for phase {phase!r}")
        order = self.rng.permutation(len(pool))
        step_fn = {"warmup": self.warmup_step, "expert": self.expert_conditioned_step, "online": self.online_step}[phase]
        bs = self.cfg.batch_size
        for start in range(0, len(pool), bs):
            step_fn([pool[i] for i in order[start : start + bs]])


@dataclass
class TrainResult:
    policy: Policy
    records: list[TrainRecord]
    plan: list[tuple[str, int]]
    checkpoints: list[Path] = field(default_factory=list)


def run_training(
    cfg: TrainConfig,
    datasets: dict[str, Sequence[Episode]],
    out_dir: Path | str | None = None,
    model_cfg: ModelConfig = ModelConfig(),
    progress=None,
) -> TrainResult:
    """Train one variant end to end according to its stage plan."""
    sparse, dense = list(datasets["sparse"]), list(datasets["dense"])
    for ep in sparse:
        if ep.reasoning is not None:
            raise ValueError(f"sparse episode {ep.episode_id} carries reasoning")
    for ep in dense:
        if ep.reasoning is None:
            raise ValueError(f"dense episode {ep.episode_id} lacks reasoning")
    trainer = Trainer(cfg, model_cfg)
    plan = stage_plan(cfg)
    trainer.total_steps = max(1, sum(trainer.steps_per_epoch(p, sparse, dense) * e for p, e in plan))
    out = Path(out_dir) if out_dir is not None else None
    ckpts: list[Path] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for stage_idx, (phase, epochs) in enumerate(plan):
        for epoch in range(epochs):
            trainer.run_epoch(phase, sparse, dense)
            if progress:
                progress(phase, epoch + 1, epochs, trainer)
        if out is not None:
            path = out / f"stage{stage_idx + 1}_{phase}.ckpt"
            trainer.policy.save(path)
            ckpts.append(path)
    if out is not None:
        path = out / "final.ckpt"
        trainer.policy.save(path)
        ckpts.append(path)
        with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for rec in trainer.records:
                fh.write(rec.to_json() + "\n")
    return TrainResult(trainer.policy, trainer.records, plan, ckpts)
