"""Synthetic failure benchmark and its on-disk dataset format.

Each episode is a short sequence of frame feature vectors. Failures add a
mode-specific signature to the second half of the episode. Episodes in the
``dense`` and ``test`` splits also carry a reasoning sentence rendered from a
small closed grammar; ``sparse`` episodes carry only the binary label.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .vocab import DEFAULT_VOCAB, FAILURE_TEMPLATES, PREFIXES, SUCCESS_TEMPLATE, Vocab

EP_LEN = 12
FRAME_DIM = 16
NUM_MODES = len(FAILURE_TEMPLATES)
NOISE_STD = 0.05
SIGNATURE_COEF = 0.8
SIGNATURE_FRAMES = range(6, 12)
SIGNATURE_SEED = 20240917

SPLITS = ("sparse", "dense", "test")
LABELS = ("success", "failure")
SUCCESS = None  # sentinel accepted by render_reasoning


class DatasetError(Exception):
    """Base class for dataset problems."""


class DatasetFormatError(DatasetError):
    """A dataset line could not be parsed."""

    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class InvariantViolation(DatasetError):
    """An episode breaks a structural invariant."""

    def __init__(self, episode_id: str, msg: str):
        super().__init__(f"episode {episode_id}: {msg}")
        self.episode_id = episode_id


def _make_signatures() -> np.ndarray:
    rng = np.random.default_rng(SIGNATURE_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((FRAME_DIM, NUM_MODES)))
    sig = q.T.copy()
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    sig.setflags(write=False)
    return sig


_SIGNATURES = _make_signatures()


@dataclass(frozen=True)
class FailureMode:
    id: int
    name: str
    template: tuple[str, ...]
    signature: np.ndarray = field(repr=False, compare=False)


FAILURE_MODES = tuple(
    FailureMode(i, name, tmpl, _SIGNATURES[i]) for i, (name, tmpl) in enumerate(FAILURE_TEMPLATES)
)


def base_ramp() -> np.ndarray:
    """Noise-free frame trajectory shared by every episode."""
    t = np.arange(EP_LEN, dtype=np.float64) / EP_LEN
    return np.repeat(t[:, None], FRAME_DIM, axis=1)


def render_reasoning(mode: Optional[FailureMode | int], rng: np.random.Generator | None = None) -> tuple[str, ...]:
    """Reasoning tokens for a failure mode, or the success sentence for ``None``."""
    if mode is None:
        return SUCCESS_TEMPLATE
    if isinstance(mode, (int, np.integer)):
        mode = FAILURE_MODES[int(mode)]
    if rng is None:
        rng = np.random.default_rng()
    prefix = PREFIXES[int(rng.integers(len(PREFIXES)))]
    return prefix + mode.template


@dataclass(frozen=True, eq=False)
class Episode:
    episode_id: str
    frames: np.ndarray
    label: str
    split: str
    reasoning: Optional[tuple[str, ...]] = None
    failure_mode: Optional[int] = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        if self.reasoning is not None:
            object.__setattr__(self, "reasoning", tuple(self.reasoning))

    @property
    def is_failure(self) -> bool:
        return self.label == "failure"

    @property
    def is_dense(self) -> bool:
        return self.reasoning is not None

    def validate(self, vocab: Vocab = DEFAULT_VOCAB) -> None:
        eid = self.episode_id
        if self.frames.shape != (EP_LEN, FRAME_DIM):
            raise InvariantViolation(eid, f"frames shape {self.frames.shape}, expected {(EP_LEN, FRAME_DIM)}")
        if not np.all(np.isfinite(self.frames)):
            raise InvariantViolation(eid, "non-finite frame values")
        if self.label not in LABELS:
            raise InvariantViolation(eid, f"unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise InvariantViolation(eid, f"unknown split {self.split!r}")
        if (self.reasoning is not None) != (self.split in ("dense", "test")):
            raise InvariantViolation(eid, f"reasoning must be present iff split is dense/test (split={self.split})")
        if (self.failure_mode is not None) != (self.label == "failure"):
            raise InvariantViolation(eid, "failure_mode must be present iff label is failure")
        if self.failure_mode is not None and not 0 <= self.failure_mode < NUM_MODES:
            raise InvariantViolation(eid, f"failure_mode {self.failure_mode} out of range")
        if self.reasoning is not None:
            if not self.reasoning:
                raise InvariantViolation(eid, "empty reasoning")
            for tok in self.reasoning:
                if tok not in vocab:
                    raise InvariantViolation(eid, f"reasoning token {tok!r} not in vocabulary")

    def to_record(self) -> dict:
        rec = {"episode_id": self.episode_id, "frames": self.frames.tolist(), "label": self.label}
        if self.reasoning is not None:
            rec["reasoning"] = list(self.reasoning)
        if self.failure_mode is not None:
            rec["failure_mode"] = self.failure_mode
        rec["split"] = self.split
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Episode":
        allowed = {"episode_id", "frames", "label", "reasoning", "failure_mode", "split"}
        extra = set(rec) - allowed
        if extra:
            raise ValueError(f"unknown fields {sorted(extra)}")
        return cls(
            episode_id=rec["episode_id"],
            frames=np.asarray(rec["frames"], dtype=np.float64),
            label=rec["label"],
            split=rec["split"],
            reasoning=tuple(rec["reasoning"]) if "reasoning" in rec else None,
            failure_mode=rec.get("failure_mode"),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.episode_id == other.episode_id
            and self.label == other.label
            and self.split == other.split
            and self.reasoning == other.reasoning
            and self.failure_mode == other.failure_mode
            and np.array_equal(self.frames, other.frames)
        )

    __hash__ = None


def generate_episode(
    rng_seed: int,
    label: str,
    mode: Optional[int] = None,
    *,
    split: str = "test",
    episode_id: str | None = None,
) -> Episode:
    """Deterministically render one episode from a seed.

    The noise draw happens before anything label-dependent, so a success and
    a failure episode built from the same seed share base and noise exactly.
    """
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    if (mode is not None) != (label == "failure"):
        raise ValueError("mode must be given iff label is 'failure'")
    if mode is not None and not 0 <= mode < NUM_MODES:
        raise ValueError(f"mode {mode} out of range 0..{NUM_MODES - 1}")
    rng = np.random.default_rng(rng_seed)
    frames = base_ramp() + rng.normal(0.0, NOISE_STD, size=(EP_LEN, FRAME_DIM))
    if mode is not None:
        frames[SIGNATURE_FRAMES.start : SIGNATURE_FRAMES.stop] += SIGNATURE_COEF * _SIGNATURES[mode]
    reasoning = None
    if split in ("dense", "test"):
        reasoning = render_reasoning(None if mode is None else FAILURE_MODES[mode], rng)
    return Episode(
        episode_id=episode_id or f"{split}-{rng_seed}",
        frames=frames,
        label=label,
        split=split,
        reasoning=reasoning,
        failure_mode=mode,
    )


@dataclass
class DatasetManifest:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"sparse": 2000, "dense": 200, "test": 300})
    success_fraction: dict = field(default_factory=lambda: {"sparse": 0.5, "dense": 0.5, "test": 0.5})
    frame_dim: int = FRAME_DIM
    ep_len: int = EP_LEN
    vocab_hash: str = DEFAULT_VOCAB.checksum()

    def validate(self) -> None:
        if set(self.counts) != set(SPLITS):
            raise ValueError(f"counts must name exactly the splits {SPLITS}")
        if set(self.success_fraction) != set(SPLITS):
            raise ValueError(f"success_fraction must name exactly the splits {SPLITS}")
        for s in SPLITS:
            if int(self.counts[s]) <= 0:
                raise ValueError(f"count for split {s!r} must be positive")
            if not 0.0 <= float(self.success_fraction[s]) <= 1.0:
                raise ValueError(f"success_fraction for split {s!r} outside [0, 1]")
        if self.success_fraction["test"] != 0.5:
            raise ValueError("test split must be balanced (success_fraction = 0.5)")
        if (self.frame_dim, self.ep_len) != (FRAME_DIM, EP_LEN):
            raise ValueError(f"generator is fixed at frame_dim={FRAME_DIM}, ep_len={EP_LEN}")
        if self.vocab_hash != DEFAULT_VOCAB.checksum():
            raise ValueError("vocab_hash does not match the built-in vocabulary")

    @property
    def ratio(self) -> float:
        return self.counts["sparse"] / self.counts["dense"]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "counts": dict(self.counts),
            "success_fraction": dict(self.success_fraction),
            "frame_dim": self.frame_dim,
            "ep_len": self.ep_len,
            "vocab_hash": self.vocab_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)

    @classmethod
    def with_ratio(cls, ratio: float, sparse: int = 2000, test: int = 300, seed: int = 0) -> "DatasetManifest":
        """Fixed sparse count, dense count chosen to hit the sparse:dense ratio."""
        dense = max(1, int(round(sparse / ratio)))
        return cls(seed=seed, counts={"sparse": sparse, "dense": dense, "test": test})


def episode_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, SPLITS.index(split), index])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_split(manifest: DatasetManifest, split: str) -> list[Episode]:
    n = int(manifest.counts[split])
    n_success = int(round(n * float(manifest.success_fraction[split])))
    plan_rng = np.random.default_rng(np.random.SeedSequence([int(manifest.seed), SPLITS.index(split), 1 << 20]))
    labels = np.array(["success"] * n_success + ["failure"] * (n - n_success))
    plan_rng.shuffle(labels)
    modes = plan_rng.integers(NUM_MODES, size=n)
    episodes = []
    for i in range(n):
        mode = int(modes[i]) if labels[i] == "failure" else None
        episodes.append(
            generate_episode(
                episode_seed(manifest.seed, split, i),
                str(labels[i]),
                mode,
                split=split,
                episode_id=f"{split}-{i:06d}",
            )
        )
    return episodes


def generate_dataset(manifest: DatasetManifest, out_dir: Path | str | None = None) -> dict[str, list[Episode]]:
    """Build all three splits; write them under ``out_dir`` when given."""
    manifest.validate()
    data = {split: generate_split(manifest, split) for split in SPLITS}
    if out_dir is not None:
        write_dataset(data, manifest, out_dir)
    return data


def _dump_line(ep: Episode) -> str:
    return json.dumps(ep.to_record(), separators=(",", ":"))


def write_dataset(data: dict[str, Sequence[Episode]], manifest: DatasetManifest, out_dir: Path | str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        with open(out / f"{split}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for ep in data[split]:
                fh.write(_dump_line(ep) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "vocab.json").write_text(DEFAULT_VOCAB.to_json() + "\n", encoding="utf-8")


def read_manifest(path: Path | str) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return DatasetManifest.from_dict(json.loads(p.read_text(encoding="utf-8")))


def load_dataset(path: Path | str, split: str, vocab: Vocab = DEFAULT_VOCAB) -> list[Episode]:
    """Read and validate one split. Raises without returning partial data."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    episodes: list[Episode] = []
    seen: set[str] = set()
    with open(p, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ep = Episode.from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(p, line_no, str(exc)) from exc
            ep.validate(vocab)
            if ep.split != split:
                raise InvariantViolation(ep.episode_id, f"split field {ep.split!r} in {split!r} file")
            if ep.episode_id in seen:
                raise InvariantViolation(ep.episode_id, "duplicate episode_id")
            seen.add(ep.episode_id)
            episodes.append(ep)
    return episodes


def load_all(path: Path | str) -> dict[str, list[Episode]]:
    return {split: load_dataset(path, split) for split in SPLITS}


def dataset_checksum(path: Path | str) -> str:
    h = hashlib.sha256()
    for name in ("manifest.json", *(f"{s}.jsonl" for s in SPLITS)):
        h.update(name.encode())
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


def linear_probe_accuracy(episodes: Iterable[Episode]) -> float:
    """In-sample accuracy of a least-squares probe on mean-pooled frames."""
    eps = list(episodes)
    X = np.stack([e.frames.mean(axis=0) for e in eps])
    X = np.hstack([X, np.ones((len(eps), 1))])
    y = np.array([1.0 if e.is_failure else -1.0 for e in eps])
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    return float(np.mean(np.sign(X @ w) == y))
