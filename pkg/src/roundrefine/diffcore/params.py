"""Named parameter storage, AdamW updates, the LR schedule and checkpoints."""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"ARMOR1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered named parameters with gradient accumulators and AdamW moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value, group: str = "default") -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        t.op = name
        self.params[name] = t
        self.groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in self.params.items()}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params.values() if p.grad is not None))

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise CheckpointError(f"{n}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for n, p in self.params.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


def cosine_schedule(step: int, total_steps: int, warmup_ratio: float = 0.03) -> float:
    """LR multiplier: linear warmup from 0, then cosine decay to 0."""
    warmup = int(math.ceil(warmup_ratio * total_steps))
    if warmup > 0 and step < warmup:
        return step / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = store.grad_norm()
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in store.params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def optimizer_step(
    store: ParamStore,
    lr: float | Mapping[str, float],
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    clip_norm: float | None = None,
) -> None:
    """One AdamW update (decoupled weight decay), then clear gradients.

    ``lr`` is either a float or a map from parameter group to rate. Weight
    decay is applied to matrices only.
    """
    for n, p in store.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {n!r}")
    if clip_norm is not None:
        clip_grad_norm(store, clip_norm)
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n, p in store.params.items():
        rate = lr[store.groups[n]] if isinstance(lr, Mapping) else lr
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.m.get(n)
        if m is None:
            m = store.m[n] = np.zeros_like(p.data)
            store.v[n] = np.zeros_like(p.data)
        v = store.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and p.data.ndim >= 2:
            p.data = p.data - rate * weight_decay * p.data
        p.data = p.data - rate * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


def save_checkpoint(store: ParamStore, path: Path | str) -> None:
    """Little-endian binary: magic, version u32, count u32, then per parameter
    name length u64, UTF-8 name, rank u64, dims u64 each, f64 payload."""
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(store))]
    for name, p in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:6] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 6)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 14
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<Q", buf, off)
            off += 8
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<Q", buf, off)
            off += 8
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out
