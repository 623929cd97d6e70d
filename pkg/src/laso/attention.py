"""Multi-head scaled dot-product attention and the pre-norm attention block.

The same block serves the encoder (self-attention), the position-dependent
summarizer (cross-attention onto the encoder output) and the decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import ConfigurationError, Parameter, Tensor

MASK_VALUE = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    d_inner: int
    activation: str = "glu"
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.activation not in ("glu", "relu"):
            raise ConfigurationError(f"activation must be 'glu' or 'relu', got {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class AttentionMask:
    """Boolean mask, True where a query may attend a key.

    ``keep`` must broadcast against [..., T_q, T_k]. Construction fails if any
    query row would have nothing to attend.
    """

    def __init__(self, keep):
        keep = np.asarray(keep, dtype=bool)
        if keep.ndim < 2:
            raise ValueError("attention mask needs at least 2 axes [T_q, T_k]")
        if not keep.any(axis=-1).all():
            raise ValueError("attention mask has a query row with no attendable key")
        self.keep = keep

    @classmethod
    def causal(cls, t: int) -> "AttentionMask":
        return cls(np.tril(np.ones((t, t), dtype=bool)))

    @classmethod
    def key_padding(cls, lengths, t_k: int) -> "AttentionMask":
        """[B, 1, 1, T_k] mask hiding keys past each sequence's length."""
        lengths = np.asarray(lengths)
        keep = np.arange(t_k)[None, :] < lengths[:, None]
        return cls(keep[:, None, None, :])


@dataclass
class Context:
    """Per-forward switches: dropout on/off, its RNG, and score retention."""

    train: bool = False
    rng: np.random.Generator | None = None
    keep_scores: bool = False
    scores: list = field(default_factory=list)
    label: tuple = ()

    def drop(self, x: Tensor, p: float) -> Tensor:
        if self.train and p > 0.0:
            return nx.dropout(x, p, self.rng)
        return x


INFERENCE = Context()


def iter_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
    """Walk dataclasses and lists, yielding dotted names with their parameters."""
    if isinstance(obj, Parameter):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif is_dataclass(obj):
        for f in fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, (Parameter, list, tuple)) or is_dataclass(val):
                yield from iter_parameters(val, f"{prefix}.{f.name}" if prefix else f.name)


def _xavier(rng, shape, fan_in, fan_out):
    return Parameter(nx.xavier_uniform(rng, shape, fan_in, fan_out))


@dataclass
class MHAParams:
    wq: Parameter  # [H, D_m, D_k]
    wk: Parameter
    wv: Parameter
    wo: Parameter  # [H*D_v, D_m]

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "MHAParams":
        h, d, dk = cfg.n_heads, cfg.d_model, cfg.d_head
        return cls(
            wq=_xavier(rng, (h, d, dk), d, dk),
            wk=_xavier(rng, (h, d, dk), d, dk),
            wv=_xavier(rng, (h, d, dk), d, dk),
            wo=_xavier(rng, (h * dk, d), h * dk, d),
        )


@dataclass
class FFNParams:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "FFNParams":
        d, di = cfg.d_model, cfg.d_inner
        hidden = 2 * di if cfg.activation == "glu" else di
        return cls(
            w1=_xavier(rng, (d, hidden), d, hidden),
            b1=Parameter(np.zeros(hidden)),
            w2=_xavier(rng, (di, d), di, d),
            b2=Parameter(np.zeros(d)),
        )


@dataclass
class LNParams:
    gain: Parameter
    bias: Parameter

    @classmethod
    def init(cls, d: int) -> "LNParams":
        return cls(Parameter(np.ones(d)), Parameter(np.zeros(d)))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, LN_EPS)


@dataclass
class BlockParams:
    ln1: LNParams
    attn: MHAParams
    ln2: LNParams
    ffn: FFNParams

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "BlockParams":
        return cls(
            ln1=LNParams.init(cfg.d_model),
            attn=MHAParams.init(cfg, rng),
            ln2=LNParams.init(cfg.d_model),
            ffn=FFNParams.init(cfg, rng),
        )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | None = None):
    """Softmax(q k^T / sqrt(d_k)) v over the last two axes.

    Returns ``(output, scores)`` where ``scores`` is the post-softmax matrix.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise nx.DimensionError(f"attention shapes q {q.shape}, k {k.shape}, v {v.shape}")
    logits = nx.scale(nx.matmul(q, nx.transpose_2d(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        logits = nx.masked_fill(logits, mask.keep, MASK_VALUE)
    scores = nx.softmax_rows(logits)
    return nx.matmul(scores, v), scores


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, p: MHAParams, mask: AttentionMask | None = None):
    """Returns ``(output [..., T_q, D_m], scores [..., H, T_q, T_k])``."""
    heads, scores = scaled_dot_attention(
        nx.head_projection(q, p.wq), nx.head_projection(k, p.wk), nx.head_projection(v, p.wv), mask
    )
    return nx.matmul(nx.merge_heads(heads), p.wo), scores


def position_wise_ffn(u: Tensor, p: FFNParams, activation: str = "glu") -> Tensor:
    h = nx.add(nx.matmul(u, p.w1), p.b1)
    h = nx.glu(h) if activation == "glu" else nx.relu(h)
    return nx.add(nx.matmul(h, p.w2), p.b2)


def attention_block(
    x_q: Tensor,
    memory: Tensor | None,
    p: BlockParams,
    cfg: AttentionConfig,
    mask: AttentionMask | None = None,
    ctx: Context = INFERENCE,
) -> Tensor:
    """Pre-norm block: LN before each sublayer, residual add after.

    ``memory=None`` means self-attention. The same LN normalises queries and
    memory.
    """
    xn = p.ln1(x_q)
    mn = xn if memory is None else p.ln1(memory)
    a, scores = multi_head_attention(xn, mn, mn, p.attn, mask)
    if ctx.keep_scores:
        ctx.scores.append((ctx.label, scores.data))
    out1 = nx.add(x_q, ctx.drop(a, cfg.dropout_p))
    f = position_wise_ffn(p.ln2(out1), p.ffn, cfg.activation)
    return nx.add(out1, ctx.drop(f, cfg.dropout_p))


def block_param_count(cfg: AttentionConfig) -> int:
    d, di = cfg.d_model, cfg.d_inner
    hidden = 2 * di if cfg.activation == "glu" else di
    mha = 4 * d * d
    ffn = d * hidden + hidden + di * d + d
    return mha + ffn + 4 * d
