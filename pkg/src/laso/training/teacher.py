"""A small bidirectional masked-token model standing in for a pretrained text teacher.

It sees only transcripts. After pretraining it is frozen and exposes its last
hidden layer over the valid token span ``<sos> tokens <eos>``, which the LASO
decoder is regressed onto.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..attention import INFERENCE, AttentionConfig, AttentionMask, BlockParams, Context, LNParams, attention_block, iter_parameters
from ..data import EOS, SOS, Utterance
from ..numerics import Parameter, Tape, Tensor
from .losses import cross_entropy_from_logits
from .optim import Adam, lr_schedule


@dataclass(frozen=True)
class TeacherConfig:
    d_model: int = 32
    n_heads: int = 2
    d_inner: int = 64
    n_blocks: int = 2
    vocab_size: int = 32
    max_len: int = 24
    dropout_p: float = 0.1
    mask_prob: float = 0.15
    epochs: int = 30
    batch_size: int = 64
    warmup: int = 200
    lr_factor: float = 1.0
    seed: int = 0

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.d_inner, "glu", self.dropout_p)


@dataclass
class TeacherOutputs:
    hidden: np.ndarray  # [L_v, D_B]

    @property
    def valid_len(self) -> int:
        return self.hidden.shape[0]


@dataclass
class ToyTeacher:
    cfg: TeacherConfig
    embed: Parameter  # [V + 1, D]; the last row is the mask token
    blocks: list[BlockParams]
    ln: LNParams
    head_w: Parameter
    head_b: Parameter
    frozen: bool = False

    @classmethod
    def init(cls, cfg: TeacherConfig) -> "ToyTeacher":
        rng = np.random.default_rng([cfg.seed, 7])
        d, v = cfg.d_model, cfg.vocab_size
        return cls(
            cfg=cfg,
            embed=Parameter(nx.xavier_uniform(rng, (v + 1, d), v + 1, d)),
            blocks=[BlockParams.init(cfg.attention, rng) for _ in range(cfg.n_blocks)],
            ln=LNParams.init(d),
            head_w=Parameter(nx.xavier_uniform(rng, (d, v), d, v)),
            head_b=Parameter(np.zeros(v)),
        )

    @property
    def mask_id(self) -> int:
        return self.cfg.vocab_size

    def parameters(self) -> list[Parameter]:
        return [p for _, p in iter_parameters(self)]

    def encode(self, ids: np.ndarray, lengths=None, ctx: Context = INFERENCE) -> Tensor:
        """[B, n] ids -> [B, n, D] last hidden layer."""
        ids = np.atleast_2d(ids)
        n, d = ids.shape[1], self.cfg.d_model
        h = nx.add(nx.scale(nx.embedding_lookup(self.embed, ids), math.sqrt(d)), Tensor(nx.sinusoidal_pe(n, d)))
        mask = None
        if lengths is not None and not (np.asarray(lengths) == n).all():
            mask = AttentionMask.key_padding(lengths, n)
        for blk in self.blocks:
            h = attention_block(h, None, blk, self.cfg.attention, mask, ctx)
        return self.ln(h)

    def teacher_hidden(self, tokens: Sequence[int]) -> TeacherOutputs:
        ids = np.array([SOS, *tokens, EOS])
        return TeacherOutputs(self.encode(ids[None]).data[0])

    def predict_masked(self, ids: np.ndarray) -> np.ndarray:
        logits = nx.add(nx.matmul(self.encode(ids), self.head_w), self.head_b)
        return logits.data.argmax(axis=-1)


def _pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    out = np.full((len(seqs), lengths.max()), EOS, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def mask_tokens(seq: np.ndarray, prob: float, mask_id: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Mask a fraction of the interior (non-``<sos>``/``<eos>``) positions; at least one."""
    inner = np.arange(1, len(seq) - 1)
    chosen = inner[rng.random(inner.size) < prob]
    if chosen.size == 0:
        chosen = rng.choice(inner, size=1)
    masked = seq.copy()
    masked[chosen] = mask_id
    sel = np.zeros(len(seq), dtype=bool)
    sel[chosen] = True
    return masked, sel


def pretrain_toy_teacher(corpus: Sequence[Utterance], cfg: TeacherConfig) -> ToyTeacher:
    """Masked-token pretraining on the transcripts, then freeze."""
    teacher = ToyTeacher.init(cfg)
    params = teacher.parameters()
    opt = Adam(params)
    rng = np.random.default_rng([cfg.seed, 8])
    seqs = [np.array([SOS, *u.tokens, EOS]) for u in corpus]
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [seqs[i] for i in order[start : start + cfg.batch_size]]
            pairs = [mask_tokens(s, cfg.mask_prob, teacher.mask_id, rng) for s in chunk]
            inp, lengths = _pad_ids([p[0] for p in pairs])
            gold, _ = _pad_ids(chunk)
            sel, _ = _pad_ids([p[1].astype(int) for p in pairs])
            opt.zero_grad()
            ctx = Context(train=True, rng=rng)
            with Tape() as tape:
                logits = nx.add(nx.matmul(teacher.encode(inp, lengths, ctx), teacher.head_w), teacher.head_b)
                loss = cross_entropy_from_logits(logits, gold, 0.0, weights=sel.astype(np.float64))
            tape.backward(loss)
            step += 1
            opt.step(lr_schedule(step, cfg.d_model, cfg.warmup, cfg.lr_factor))
    teacher.frozen = True
    return teacher


def masked_accuracy(teacher: ToyTeacher, corpus: Sequence[Utterance], seed: int = 0) -> float:
    """Fraction of masked positions whose original token is recovered."""
    rng = np.random.default_rng(seed)
    hits = total = 0
    for u in corpus:
        seq = np.array([SOS, *u.tokens, EOS])
        masked, sel = mask_tokens(seq, teacher.cfg.mask_prob, teacher.mask_id, rng)
        pred = teacher.predict_masked(masked[None])[0]
        hits += int((pred[sel] == seq[sel]).sum())
        total += int(sel.sum())
    return hits / total


@dataclass
class TeacherCache:
    """Precomputed frozen-teacher outputs keyed by utterance id."""

    hidden: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, teacher: ToyTeacher, corpus: Sequence[Utterance]) -> "TeacherCache":
        return cls({u.id: teacher.teacher_hidden(u.tokens).hidden for u in corpus})

    def batch(self, ids: Sequence[str]) -> list[np.ndarray]:
        return [self.hidden[i] for i in ids]
