"""The joint detection + reasoning policy.

A per-frame encoder turns an episode into a memory sequence. The previous
round's outputs are written as conditioning tokens in front of that memory.
A small transformer decoder serves both heads: the reasoning head samples
tokens autoregressively while cross-attending to the conditioned memory, and
the classification head averages the decoder's early layer outputs over the
conditioned memory, pools them with a learnable CLS query and emits the
failure probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .datagen import EP_LEN, FRAME_DIM
from .diffcore import ParamStore, Tensor
from .vocab import COND_FAILURE, COND_NONE, COND_SUCCESS, DEFAULT_VOCAB, SEP, Vocab

DETECTIONS = ("none", "success", "failure")
TASK_PROMPTS = ("detect", "reason", "both")
ENCODER_GROUP = "encoder"
HEAD_GROUP = "heads"


@dataclass(frozen=True)
class ModelConfig:
    frame_dim: int = FRAME_DIM
    hidden: int = 64
    decoder_layers: int = 2
    attn_heads: int = 2
    max_reasoning_len: int = 12
    dropout: float = 0.1
    mlp_ratio: int = 2
    classifier_taps: int = 4

    def __post_init__(self):
        if self.hidden % self.attn_heads:
            raise ValueError("hidden must be divisible by attn_heads")
        if self.decoder_layers < 1 or self.max_reasoning_len < 1:
            raise ValueError("decoder_layers and max_reasoning_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def max_context_len(self) -> int:
        return 2 + self.max_reasoning_len

    @property
    def source_len(self) -> int:
        return self.max_context_len + EP_LEN


@dataclass(frozen=True)
class ConditioningContext:
    """Previous-round outputs fed back to the policy.

    ``prev_reasoning`` holds token ids without EOS/PAD; ``None`` means absent.
    """

    prev_detection: str = "none"
    prev_reasoning: Optional[tuple[int, ...]] = None
    task_prompt: str = "both"

    def __post_init__(self):
        if self.prev_detection not in DETECTIONS:
            raise ValueError(f"prev_detection must be one of {DETECTIONS}")
        if self.task_prompt not in TASK_PROMPTS:
            raise ValueError(f"task_prompt must be one of {TASK_PROMPTS}")
        if self.prev_reasoning is not None:
            object.__setattr__(self, "prev_reasoning", tuple(int(t) for t in self.prev_reasoning))

    def tokens(self, vocab: Vocab = DEFAULT_VOCAB, max_reasoning_len: int = 12) -> list[int]:
        cond = {"none": COND_NONE, "success": COND_SUCCESS, "failure": COND_FAILURE}[self.prev_detection]
        ids = [vocab.id(cond), vocab.id(SEP)]
        if self.prev_reasoning:
            ids.extend(self.prev_reasoning[:max_reasoning_len])
        return ids


ROUND0 = ConditioningContext()


def strip_reasoning(ids: Sequence[int], vocab: Vocab = DEFAULT_VOCAB) -> tuple[int, ...]:
    """Drop EOS and anything after it, and PAD tokens."""
    out = []
    for t in ids:
        if t == vocab.eos:
            break
        if t != vocab.pad:
            out.append(int(t))
    return tuple(out)


def bernoulli_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log1p(-p), 0.0))
    return h


def categorical_entropy(dists: np.ndarray) -> np.ndarray:
    """Entropy in nats along the last axis (0 log 0 = 0)."""
    d = np.asarray(dists, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(d > 0, d * np.log(d), 0.0).sum(axis=-1)


@dataclass
class RoundOutput:
    det_prob: float
    reasoning: tuple[int, ...]
    step_dists: np.ndarray = field(repr=False)
    H_det: float = 0.0
    H_reason: float = 0.0

    @property
    def det_label(self) -> str:
        return "failure" if self.det_prob >= 0.5 else "success"

    @classmethod
    def build(cls, det_prob: float, reasoning, step_dists) -> "RoundOutput":
        dists = np.asarray(step_dists, dtype=np.float64)
        h_det = float(bernoulli_entropy(det_prob))
        h_reason = float(categorical_entropy(dists).mean()) if len(dists) else 0.0
        return cls(float(det_prob), tuple(int(t) for t in reasoning), dists, h_det, h_reason)

    def next_context(self, vocab: Vocab = DEFAULT_VOCAB) -> ConditioningContext:
        return ConditioningContext(self.det_label, strip_reasoning(self.reasoning, vocab), "both")


def _as_batch(frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return x


class Policy:
    """Shared encoder/decoder with a classification head and a token head."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), vocab: Vocab = DEFAULT_VOCAB, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        self.params = ParamStore()
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg, P = self.cfg, self.params
        H, V = cfg.hidden, len(self.vocab)

        def lin(name, n_in, n_out, group=HEAD_GROUP, zero=False):
            w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))
            P.add(name + ".W", w, group)
            P.add(name + ".b", np.zeros(n_out), group)

        def ln(name, group=HEAD_GROUP):
            P.add(name + ".g", np.ones(H), group)
            P.add(name + ".b", np.zeros(H), group)

        def attn(name):
            for part in "qkvo":
                lin(f"{name}.{part}", H, H)

        lin("enc.proj", cfg.frame_dim, H, ENCODER_GROUP)
        ln("enc.ln", ENCODER_GROUP)
        P.add("tok_emb", rng.normal(0.0, 0.5, (V, H)), HEAD_GROUP)
        P.add("src_pos", rng.normal(0.0, 0.1, (cfg.source_len, H)), HEAD_GROUP)
        P.add("dec_pos", rng.normal(0.0, 0.1, (cfg.max_reasoning_len + 1, H)), HEAD_GROUP)
        ln("src_ln")
        for i in range(cfg.decoder_layers):
            ln(f"dec{i}.ln1")
            attn(f"dec{i}.self")
            ln(f"dec{i}.ln2")
            attn(f"dec{i}.cross")
            ln(f"dec{i}.ln3")
            lin(f"dec{i}.mlp1", H, H * cfg.mlp_ratio)
            lin(f"dec{i}.mlp2", H * cfg.mlp_ratio, H)
        ln("dec_ln")
        lin("lm_head", H, V)
        lin("cls.proj1", H, H)
        lin("cls.proj2", H, H)
        ln("cls.ln")
        P.add("cls.token", rng.normal(0.0, 0.5, (1, 1, H)), HEAD_GROUP)
        attn("cls.attn")
        ln("cls.out_ln")
        lin("cls.mlp1", H, H)
        lin("cls.mlp2", H, H // 2)
        lin("cls.mlp3", H // 2, 1, zero=True)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _dense(self, name: str, x: Tensor) -> Tensor:
        return dc.dense(x, self._p(name + ".W"), self._p(name + ".b"))

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return dc.layernorm(x, self._p(name + ".g"), self._p(name + ".b"))

    def _heads(self, name: str, x: Tensor) -> Tensor:
        """Project (B, L, H) to per-head (B, heads, L, H/heads)."""
        B, L, H = x.shape
        h = self.cfg.attn_heads
        return self._dense(name, x).reshape(B, L, h, H // h).transpose(0, 2, 1, 3)

    def _attend(self, name: str, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
        B, h, Lq, d = q.shape
        o = dc.cross_attention(q, k, v, None if mask is None else mask[:, None])
        return self._dense(name + ".o", o.transpose(0, 2, 1, 3).reshape(B, Lq, h * d))

    def _mha(self, name: str, xq: Tensor, xkv: Tensor, mask: np.ndarray | None) -> Tensor:
        q = self._heads(name + ".q", xq)
        k = self._heads(name + ".k", xkv)
        v = self._heads(name + ".v", xkv)
        return self._attend(name, q, k, v, mask)

    # ------------------------------------------------------------ building blocks

    def encode(self, frames) -> Tensor:
        """Per-frame projection to the hidden size: (B, EP_LEN, hidden)."""
        x = _as_batch(frames)
        if x.shape[1:] != (EP_LEN, self.cfg.frame_dim):
            raise dc.ShapeError("encode", x.shape, (EP_LEN, self.cfg.frame_dim))
        h = dc.gelu(self._dense("enc.proj", Tensor(x)))
        return self._ln("enc.ln", h)

    def context_tokens(self, contexts: Sequence[ConditioningContext]) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded (B, Lc) token ids and validity mask; Lc is the longest context in the batch."""
        toks = [ctx.tokens(self.vocab, self.cfg.max_reasoning_len) for ctx in contexts]
        Lc = max(len(t) for t in toks)
        ids = np.full((len(contexts), Lc), self.vocab.pad, dtype=np.int64)
        mask = np.zeros((len(contexts), Lc), dtype=bool)
        for i, t in enumerate(toks):
            ids[i, : len(t)] = t
            mask[i, : len(t)] = True
        return ids, mask

    def build_source(self, memory: Tensor, contexts: Sequence[ConditioningContext]) -> tuple[Tensor, np.ndarray]:
        """[context tokens || memory] with positions, plus key mask (B, L_src).

        Context tokens take positions 0..Lc-1 and memory frames always take the
        last EP_LEN positions of the table, whatever the batch's context length.
        """
        B = memory.shape[0]
        if len(contexts) != B:
            raise dc.ShapeError("build_source", memory.shape, (len(contexts),))
        ids, cmask = self.context_tokens(contexts)
        Lc = ids.shape[1]
        ctx = dc.embedding(self._p("tok_emb"), ids)
        pos_rows = np.concatenate([np.arange(Lc), np.arange(self.cfg.max_context_len, self.cfg.source_len)])
        src = dc.concat([ctx, memory], axis=1) + self._p("src_pos")[pos_rows]
        src = self._ln("src_ln", src)
        mask = np.concatenate([cmask, np.ones((B, EP_LEN), dtype=bool)], axis=1)
        return src, mask

    def _layer(self, i: int, x: Tensor, self_mask: np.ndarray, src: Tensor | None, src_mask: np.ndarray | None) -> Tensor:
        """Pre-norm decoder block; the cross-attention sub-block is skipped when ``src`` is None."""
        pre = self._ln(f"dec{i}.ln1", x)
        x = x + self._mha(f"dec{i}.self", pre, pre, self_mask)
        if src is not None:
            x = x + self._mha(f"dec{i}.cross", self._ln(f"dec{i}.ln2", x), src, src_mask)
        hidden = dc.gelu(self._dense(f"dec{i}.mlp1", self._ln(f"dec{i}.ln3", x)))
        return x + self._dense(f"dec{i}.mlp2", hidden)

    # ------------------------------------------------------------ heads

    def classify_source(self, src: Tensor, src_mask: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Failure probability, shape (B,)."""
        cfg = self.cfg
        B = src.shape[0]
        key_mask = src_mask[:, None, :]
        taps = min(cfg.classifier_taps, cfg.decoder_layers)
        x = src
        outs = []
        for i in range(taps):
            x = self._layer(i, x, key_mask, None, None)
            outs.append(x)
        feats = outs[0]
        for o in outs[1:]:
            feats = feats + o
        if len(outs) > 1:
            feats = feats * (1.0 / len(outs))
        f = dc.gelu(self._dense("cls.proj1", feats))
        f = dc.dropout(f, cfg.dropout, rng, training)
        f = self._ln("cls.ln", self._dense("cls.proj2", f))
        cls = Tensor(np.ones((B, 1, 1))) * self._p("cls.token")
        pooled = self._mha("cls.attn", cls, f, key_mask)
        z = self._ln("cls.out_ln", pooled.reshape(B, cfg.hidden))
        z = dc.dropout(dc.gelu(self._dense("cls.mlp1", z)), cfg.dropout, rng, training)
        z = dc.dropout(dc.gelu(self._dense("cls.mlp2", z)), cfg.dropout, rng, training)
        return dc.sigmoid(self._dense("cls.mlp3", z)).reshape(B)

    def classify(self, memory: Tensor, contexts: Sequence[ConditioningContext], training=False, rng=None) -> Tensor:
        src, mask = self.build_source(memory, contexts)
        return self.classify_source(src, mask, training, rng)

    def decoder_logits(self, src: Tensor, src_mask: np.ndarray, inputs: np.ndarray) -> Tensor:
        """Token logits (B, L, V) for decoder input ids (B, L) starting with BOS."""
        B, L = inputs.shape
        if L > self.cfg.max_reasoning_len + 1:
            raise dc.ShapeError("decoder_logits", inputs.shape, (self.cfg.max_reasoning_len + 1,))
        x = dc.embedding(self._p("tok_emb"), inputs) + self._p("dec_pos")[:L]
        causal = np.tril(np.ones((L, L), dtype=bool))[None]
        cross = src_mask[:, None, :]
        for i in range(self.cfg.decoder_layers):
            x = self._layer(i, x, causal, src, cross)
        return self._dense("lm_head", self._ln("dec_ln", x))

    def teacher_inputs(self, targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Decoder inputs (BOS + targets shifted right), padded targets and step mask."""
        if not targets:
            raise ValueError("no targets")
        L = max(len(t) for t in targets)
        if L > self.cfg.max_reasoning_len + 1:
            raise ValueError(f"target length {L} exceeds {self.cfg.max_reasoning_len + 1}")
        V = len(self.vocab)
        inp = np.full((len(targets), L), self.vocab.pad, dtype=np.int64)
        tgt = np.full((len(targets), L), self.vocab.pad, dtype=np.int64)
        mask = np.zeros((len(targets), L), dtype=bool)
        for i, t in enumerate(targets):
            t = [int(x) for x in t]
            if not t:
                raise ValueError("empty target sequence")
            if t[-1] != self.vocab.eos:
                raise ValueError("target sequence must end with EOS")
            if min(t) < 0 or max(t) >= V:
                raise ValueError("target token id out of range")
            inp[i, 0] = self.vocab.bos
            inp[i, 1 : len(t)] = t[:-1]
            tgt[i, : len(t)] = t
            mask[i, : len(t)] = True
        return inp, tgt, mask

    def ntp_teacher_forced_source(self, src: Tensor, src_mask: np.ndarray, targets):
        inp, tgt, mask = self.teacher_inputs(targets)
        return dc.softmax(self.decoder_logits(src, src_mask, inp), axis=-1), tgt, mask

    def ntp_teacher_forced(self, memory: Tensor, contexts: Sequence[ConditioningContext], targets):
        """Per-step distributions (B, L, V) for EOS-terminated targets, with padded targets and mask."""
        src, mask = self.build_source(memory, contexts)
        return self.ntp_teacher_forced_source(src, mask, targets)

    def decode_source(self, src: Tensor, src_mask: np.ndarray, temperature: float, rngs) -> list[tuple[tuple[int, ...], np.ndarray]]:
        """Autoregressive sampling with cached keys/values.

        ``rngs`` holds one Generator per row; a row draws one uniform per
        emitted token, so its sample depends on its own stream only.
        Temperature 0 means greedy decoding, with one-hot step distributions.
        """
        if temperature < 0:
            raise ValueError("temperature must be > 0, or 0 for greedy decoding")
        B = src.shape[0]
        V = len(self.vocab)
        eos = self.vocab.eos
        n_steps = self.cfg.max_reasoning_len + 1
        tok = np.full(B, self.vocab.bos, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        tokens: list[list[int]] = [[] for _ in range(B)]
        dists: list[list[np.ndarray]] = [[] for _ in range(B)]
        cross_mask = src_mask[:, None, :]
        with dc.no_grad():
            cross_kv = [
                (self._heads(f"dec{i}.cross.k", src), self._heads(f"dec{i}.cross.v", src))
                for i in range(self.cfg.decoder_layers)
            ]
            self_kv: list[tuple[Tensor, Tensor] | None] = [None] * self.cfg.decoder_layers
            for step in range(n_steps):
                x = dc.embedding(self._p("tok_emb"), tok[:, None]) + self._p("dec_pos")[step : step + 1]
                for i in range(self.cfg.decoder_layers):
                    pre = self._ln(f"dec{i}.ln1", x)
                    k_new, v_new = self._heads(f"dec{i}.self.k", pre), self._heads(f"dec{i}.self.v", pre)
                    if self_kv[i] is not None:
                        k_new = dc.concat([self_kv[i][0], k_new], axis=2)
                        v_new = dc.concat([self_kv[i][1], v_new], axis=2)
                    self_kv[i] = (k_new, v_new)
                    x = x + self._attend(f"dec{i}.self", self._heads(f"dec{i}.self.q", pre), k_new, v_new, None)
                    q = self._heads(f"dec{i}.cross.q", self._ln(f"dec{i}.ln2", x))
                    x = x + self._attend(f"dec{i}.cross", q, cross_kv[i][0], cross_kv[i][1], cross_mask)
                    x = x + self._dense(f"dec{i}.mlp2", dc.gelu(self._dense(f"dec{i}.mlp1", self._ln(f"dec{i}.ln3", x))))
                logits = self._dense("lm_head", self._ln("dec_ln", x)).data[:, 0, :]
                if temperature == 0:
                    nxt = logits.argmax(axis=-1)
                    probs = np.zeros_like(logits)
                    probs[np.arange(B), nxt] = 1.0
                else:
                    z = logits / temperature
                    z = z - z.max(axis=-1, keepdims=True)
                    probs = np.exp(z)
                    probs /= probs.sum(axis=-1, keepdims=True)
                    u = np.array([rngs[i].random() if not done[i] else 0.0 for i in range(B)])
                    cdf = np.cumsum(probs, axis=-1)
                    nxt = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=-1), V - 1)
                for i in np.flatnonzero(~done):
                    tokens[i].append(int(nxt[i]))
                    dists[i].append(probs[i])
                    if nxt[i] == eos:
                        done[i] = True
                if done.all():
                    break
                tok = np.where(done, self.vocab.pad, nxt)
        return [(tuple(tokens[i]), np.array(dists[i])) for i in range(B)]

    def decode_reasoning(self, memory: Tensor, contexts, temperature: float, rngs):
        src, mask = self.build_source(memory, contexts)
        return self.decode_source(src, mask, temperature, rngs)

    # ------------------------------------------------------------ joint round

    def predict_batch(self, frames, contexts: Sequence[ConditioningContext], temperature: float, rngs) -> list[RoundOutput]:
        """One refinement round for a batch; forward-only (dropout off)."""
        with dc.no_grad():
            memory = self.encode(frames)
            src, mask = self.build_source(memory, contexts)
            probs = self.classify_source(src, mask).data
            decoded = self.decode_source(src, mask, temperature, rngs)
        return [RoundOutput.build(probs[i], toks, d) for i, (toks, d) in enumerate(decoded)]

    def predict_round(self, frames, context: ConditioningContext = ROUND0, temperature: float = 0.7, rng=None) -> RoundOutput:
        if rng is None:
            rng = np.random.default_rng()
        return self.predict_batch(_as_batch(frames), [context], temperature, [rng])[0]

    def loss_terms(
        self,
        frames,
        contexts: Sequence[ConditioningContext],
        labels,
        targets: Sequence[Optional[Sequence[int]]],
        training: bool = True,
        rng=None,
    ) -> tuple[Tensor, Optional[Tensor], np.ndarray]:
        """Differentiable per-sample BCE (B,) and NTP for the rows with targets.

        Returns (bce, ntp_dense, dense_rows); ``ntp_dense`` is None when no row
        carries a reasoning target, otherwise it is aligned with ``dense_rows``.
        """
        memory = self.encode(frames)
        src, mask = self.build_source(memory, contexts)
        probs = self.classify_source(src, mask, training, rng)
        bce = dc.bce_loss(probs, np.asarray(labels, dtype=np.float64))
        dense_rows = np.array([i for i, t in enumerate(targets) if t is not None], dtype=np.int64)
        if dense_rows.size == 0:
            return bce, None, dense_rows
        sub_src = src[dense_rows]
        dists, tgt, tmask = self.ntp_teacher_forced_source(sub_src, mask[dense_rows], [targets[i] for i in dense_rows])
        return bce, dc.ntp_loss(dists, tgt, tmask), dense_rows

    # ------------------------------------------------------------ persistence

    def save(self, path) -> None:
        dc.save_checkpoint(self.params, path)

    @classmethod
    def load(cls, path, cfg: ModelConfig = ModelConfig(), vocab: Vocab = DEFAULT_VOCAB) -> "Policy":
        pol = cls(cfg, vocab, seed=0)
        pol.params.load_state_dict(dc.read_checkpoint(path))
        return pol

    def copy(self) -> "Policy":
        pol = Policy.__new__(Policy)
        pol.cfg, pol.vocab = self.cfg, self.vocab
        pol.params = ParamStore()
        for n, p in self.params.items():
            pol.params.add(n, p.data.copy(), self.params.groups[n])
        return pol
