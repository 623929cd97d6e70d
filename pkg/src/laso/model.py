"""The non-autoregressive LASO network and a matched autoregressive baseline.

LASO: conv frontend -> encoder (self-attention) -> position-dependent
summarizer (queries are positional encodings, keys/values the encoder output)
-> decoder (self-attention over the L token slots) -> softmax over the
vocabulary, all in one pass.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (
    INFERENCE,
    AttentionConfig,
    AttentionMask,
    BlockParams,
    Context,
    FFNParams,
    LNParams,
    MHAParams,
    attention_block,
    block_param_count,
    iter_parameters,
    multi_head_attention,
    position_wise_ffn,
)
from .data import EOS, SOS, SPECIALS
from .numerics import ConfigurationError, Parameter, Tensor

MIN_FRAMES = 4  # one output frame after two stride-2 layers needs a full stride-4 window
CONV_CHANNELS = 32


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class LasoConfig:
    attention: AttentionConfig
    n_enc: int
    n_pds: int
    n_dec: int
    max_len: int
    vocab_size: int
    d_feat: int
    teacher_dim: int = 0
    conv_channels: int = CONV_CHANNELS

    def __post_init__(self):
        if self.vocab_size < len(SPECIALS) + 1:
            raise ConfigurationError(f"vocab_size {self.vocab_size} leaves no room beyond the reserved ids")
        if self.max_len < 3:
            raise ConfigurationError(f"max_len {self.max_len} too small")
        if self.attention.d_model % 2:
            raise ConfigurationError("d_model must be even for sinusoidal encodings")
        if min(self.n_enc, self.n_pds, self.n_dec) < 0 or self.n_pds < 1:
            raise ConfigurationError("block counts must be >= 0 and n_pds >= 1")

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def distill(self) -> bool:
        return self.teacher_dim > 0

    @property
    def subsampled_feat(self) -> int:
        return nx.conv_out_len(nx.conv_out_len(self.d_feat))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LasoConfig":
        d = dict(d)
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)


def subsampled_length(t0: int) -> int:
    return nx.conv_out_len(nx.conv_out_len(t0))


# ---------------------------------------------------------------------------
# Encoder shared by both models
# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    conv1_w: Parameter
    conv1_b: Parameter
    conv2_w: Parameter
    conv2_b: Parameter
    proj_w: Parameter
    proj_b: Parameter
    blocks: list[BlockParams]
    ln: LNParams

    @classmethod
    def init(cls, cfg: LasoConfig, rng: np.random.Generator) -> "EncoderParams":
        c, d = cfg.conv_channels, cfg.d_model
        flat = cfg.subsampled_feat * c
        return cls(
            conv1_w=Parameter(nx.xavier_uniform(rng, (3, 3, 1, c), 9, 9 * c)),
            conv1_b=Parameter(np.zeros(c)),
            conv2_w=Parameter(nx.xavier_uniform(rng, (3, 3, c, c), 9 * c, 9 * c)),
            conv2_b=Parameter(np.zeros(c)),
            proj_w=Parameter(nx.xavier_uniform(rng, (flat, d), flat, d)),
            proj_b=Parameter(np.zeros(d)),
            blocks=[BlockParams.init(cfg.attention, rng) for _ in range(cfg.n_enc)],
            ln=LNParams.init(d),
        )


def _time_mask(h: Tensor, lengths: np.ndarray) -> Tensor:
    keep = np.arange(h.shape[1])[None, :] < lengths[:, None]
    if keep.all():
        return h
    return nx.mul(h, keep[:, :, None, None].astype(np.float64))


def conv_subsample(x: Tensor, lengths: np.ndarray, p: EncoderParams) -> tuple[Tensor, np.ndarray]:
    """[B, T0, D_feat] -> ([B, T, D_m], lengths after subsampling)."""
    lengths = np.asarray(lengths)
    if lengths.min() < MIN_FRAMES:
        raise nx.TooShortError(int(lengths.min()), MIN_FRAMES)
    b, t0, f = x.shape
    # boundary taps must see zeros, not whatever the padding holds
    h = _time_mask(nx.reshape(x, (b, t0, f, 1)), lengths)
    l1 = (lengths - 1) // 2 + 1
    h = _time_mask(nx.relu(nx.conv2d_s2(h, p.conv1_w, p.conv1_b)), l1)
    l2 = (l1 - 1) // 2 + 1
    h = _time_mask(nx.relu(nx.conv2d_s2(h, p.conv2_w, p.conv2_b)), l2)
    _, t, f2, c = h.shape
    h = nx.reshape(h, (b, t, f2 * c))
    return nx.add(nx.matmul(h, p.proj_w), p.proj_b), l2


def run_encoder(x: Tensor, lengths, p: EncoderParams, cfg: LasoConfig, ctx: Context = INFERENCE):
    """Frontend, sinusoidal encodings, N_e self-attention blocks, final LN."""
    h, z_len = conv_subsample(x, lengths, p)
    h = nx.add(h, Tensor(nx.sinusoidal_pe(h.shape[1], cfg.d_model)))
    mask = None if (z_len == h.shape[1]).all() else AttentionMask.key_padding(z_len, h.shape[1])
    for i, blk in enumerate(p.blocks):
        ctx.label = ("encoder", i)
        h = attention_block(h, None, blk, cfg.attention, mask, ctx)
    return p.ln(h), z_len


def _as_batch(features) -> tuple[Tensor, np.ndarray]:
    """Accept [T0, D] / [B, T0, D] arrays or a (padded array, lengths) pair."""
    if isinstance(features, tuple):
        feats, lengths = features
        return Tensor(feats), np.asarray(lengths)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    return Tensor(feats), np.full(feats.shape[0], feats.shape[1])


# ---------------------------------------------------------------------------
# LASO
# ---------------------------------------------------------------------------


@dataclass
class LasoModel:
    cfg: LasoConfig
    encoder: EncoderParams
    pds_blocks: list[BlockParams]
    pds_ln: LNParams
    dec_blocks: list[BlockParams]
    dec_ln: LNParams
    out_w: Parameter
    out_b: Parameter
    teacher_proj: Parameter | None = None
    counter: Counter = field(default_factory=Counter, repr=False, compare=False)

    @classmethod
    def init(cls, cfg: LasoConfig, seed: int = 0) -> "LasoModel":
        rng = np.random.default_rng(seed)
        d, v = cfg.d_model, cfg.vocab_size
        model = cls(
            cfg=cfg,
            encoder=EncoderParams.init(cfg, rng),
            pds_blocks=[BlockParams.init(cfg.attention, rng) for _ in range(cfg.n_pds)],
            pds_ln=LNParams.init(d),
            dec_blocks=[BlockParams.init(cfg.attention, rng) for _ in range(cfg.n_dec)],
            dec_ln=LNParams.init(d),
            out_w=Parameter(nx.xavier_uniform(rng, (d, v), d, v)),
            out_b=Parameter(np.zeros(v)),
            teacher_proj=(
                Parameter(nx.xavier_uniform(rng, (d, cfg.teacher_dim), d, cfg.teacher_dim))
                if cfg.teacher_dim and cfg.teacher_dim != d
                else None
            ),
        )
        model.name_parameters()
        return model

    def name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return list(iter_parameters(self))

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- stages ------------------------------------------------------------

    def encode(self, x: Tensor, lengths, ctx: Context = INFERENCE):
        return run_encoder(x, lengths, self.encoder, self.cfg, ctx)

    def summarize(self, z: Tensor, z_len: np.ndarray | None = None, ctx: Context = INFERENCE) -> Tensor:
        """Fixed L x D_m token-slot representation from any number of frames."""
        cfg = self.cfg
        t = z.shape[-2]
        mask = None
        if z_len is not None and not (np.asarray(z_len) == t).all():
            mask = AttentionMask.key_padding(z_len, t)
        q = Tensor(np.broadcast_to(nx.sinusoidal_pe(cfg.max_len, cfg.d_model), z.shape[:-2] + (cfg.max_len, cfg.d_model)))
        for i, blk in enumerate(self.pds_blocks):
            ctx.label = ("pds", i)
            q = attention_block(q, z, blk, cfg.attention, mask, ctx)
        return self.pds_ln(q)

    def decoder_hidden(self, q: Tensor, ctx: Context = INFERENCE) -> Tensor:
        """Last decoder hidden layer (after the final LN, before the output projection)."""
        n = q.shape[0] if q.ndim == 3 else 1
        self.counter["decoder_passes"] += n
        h = q
        for i, blk in enumerate(self.dec_blocks):
            self.counter["decoder_blocks"] += n
            ctx.label = ("decoder", i)
            h = attention_block(h, None, blk, self.cfg.attention, None, ctx)
        return self.dec_ln(h)

    def logits(self, hidden: Tensor) -> Tensor:
        return nx.add(nx.matmul(hidden, self.out_w), self.out_b)

    def run(self, features, ctx: Context = INFERENCE) -> tuple[Tensor, Tensor]:
        """Batched pass; returns ``(logits [B, L, V], decoder hidden [B, L, D_m])``."""
        x, lengths = _as_batch(features)
        z, z_len = self.encode(x, lengths, ctx)
        hidden = self.decoder_hidden(self.summarize(z, z_len, ctx), ctx)
        return self.logits(hidden), hidden

    def probs(self, features) -> np.ndarray:
        """[B, L, V] distributions, batched, no diagnostics."""
        logits, _ = self.run(features)
        return nx.softmax_rows(logits).data


def param_count(cfg: LasoConfig) -> int:
    d, c, v = cfg.d_model, cfg.conv_channels, cfg.vocab_size
    frontend = 9 * c + c + 9 * c * c + c + cfg.subsampled_feat * c * d + d
    blocks = (cfg.n_enc + cfg.n_pds + cfg.n_dec) * block_param_count(cfg.attention)
    final_lns = 3 * 2 * d
    proj = d * cfg.teacher_dim if cfg.teacher_dim and cfg.teacher_dim != d else 0
    return frontend + blocks + final_lns + d * v + v + proj


def encode(features, model: LasoModel) -> np.ndarray:
    """[T0, D_feat] -> [T, D_m]."""
    z, _ = model.encode(*_as_batch(features))
    return z.data[0]


def summarize(z, model: LasoModel) -> np.ndarray:
    return model.summarize(Tensor(np.asarray(z)[None])).data[0]


def decode_nar(q, model: LasoModel) -> np.ndarray:
    """[L, D_m] token-slot states -> [L, V] distributions."""
    hidden = model.decoder_hidden(Tensor(np.asarray(q)[None]))
    return nx.softmax_rows(model.logits(hidden)).data[0]


def forward(features, model: LasoModel, diagnostics: bool = False):
    """One utterance [T0, D_feat] -> (probs [L, V], {(module, layer, head): scores})."""
    ctx = Context(keep_scores=diagnostics)
    logits, _ = model.run(features, ctx)
    probs = nx.softmax_rows(logits).data[0]
    diag = {}
    for (module, layer), scores in ctx.scores:
        for h in range(scores.shape[1]):
            diag[(module, layer, h)] = scores[0, h]
    return probs, diag


# ---------------------------------------------------------------------------
# Autoregressive baseline
# ---------------------------------------------------------------------------


@dataclass
class ArBlockParams:
    ln_self: LNParams
    self_attn: MHAParams
    ln_cross: LNParams
    cross_attn: MHAParams
    ln_ffn: LNParams
    ffn: FFNParams

    @classmethod
    def init(cls, cfg: AttentionConfig, rng) -> "ArBlockParams":
        d = cfg.d_model
        return cls(
            LNParams.init(d), MHAParams.init(cfg, rng),
            LNParams.init(d), MHAParams.init(cfg, rng),
            LNParams.init(d), FFNParams.init(cfg, rng),
        )


def ar_block(x: Tensor, z: Tensor, p: ArBlockParams, cfg: AttentionConfig, self_mask, cross_mask, ctx: Context):
    xn = p.ln_self(x)
    a, s1 = multi_head_attention(xn, xn, xn, p.self_attn, self_mask)
    x = nx.add(x, ctx.drop(a, cfg.dropout_p))
    zn = p.ln_cross(z)
    a, s2 = multi_head_attention(p.ln_cross(x), zn, zn, p.cross_attn, cross_mask)
    if ctx.keep_scores:
        ctx.scores.append((ctx.label + ("self",), s1.data))
        ctx.scores.append((ctx.label + ("cross",), s2.data))
    x = nx.add(x, ctx.drop(a, cfg.dropout_p))
    f = position_wise_ffn(p.ln_ffn(x), p.ffn, cfg.activation)
    return nx.add(x, ctx.drop(f, cfg.dropout_p))


@dataclass
class ArBaselineModel:
    """Transformer decoder over the same encoder, factorised left to right."""

    cfg: LasoConfig
    encoder: EncoderParams
    embed: Parameter
    dec_blocks: list[ArBlockParams]
    dec_ln: LNParams
    out_w: Parameter
    out_b: Parameter
    counter: Counter = field(default_factory=Counter, repr=False, compare=False)

    @classmethod
    def init(cls, cfg: LasoConfig, seed: int = 0) -> "ArBaselineModel":
        rng = np.random.default_rng(seed)
        d, v = cfg.d_model, cfg.vocab_size
        model = cls(
            cfg=cfg,
            encoder=EncoderParams.init(cfg, rng),
            embed=Parameter(nx.xavier_uniform(rng, (v, d), v, d)),
            dec_blocks=[ArBlockParams.init(cfg.attention, rng) for _ in range(cfg.n_dec)],
            dec_ln=LNParams.init(d),
            out_w=Parameter(nx.xavier_uniform(rng, (d, v), d, v)),
            out_b=Parameter(np.zeros(v)),
        )
        model.name_parameters()
        return model

    name_parameters = LasoModel.name_parameters
    named_parameters = LasoModel.named_parameters
    parameters = LasoModel.parameters
    zero_grad = LasoModel.zero_grad

    def encode(self, x: Tensor, lengths, ctx: Context = INFERENCE):
        return run_encoder(x, lengths, self.encoder, self.cfg, ctx)

    def decode_prefix(self, ids, z: Tensor, z_len=None, ctx: Context = INFERENCE) -> Tensor:
        """Teacher-forced logits [B, n, V] for prefixes ``ids`` [B, n]."""
        ids = np.atleast_2d(np.asarray(ids))
        b, n = ids.shape
        if n > self.cfg.max_len:
            raise LengthError(f"prefix of {n} tokens exceeds max_len {self.cfg.max_len}")
        self.counter["decoder_passes"] += b
        d = self.cfg.d_model
        h = nx.add(nx.scale(nx.embedding_lookup(self.embed, ids), math.sqrt(d)), Tensor(nx.sinusoidal_pe(n, d)))
        self_mask = AttentionMask.causal(n)
        t = z.shape[-2]
        cross_mask = None
        if z_len is not None and not (np.asarray(z_len) == t).all():
            cross_mask = AttentionMask.key_padding(z_len, t)
        for i, blk in enumerate(self.dec_blocks):
            self.counter["decoder_blocks"] += b
            ctx.label = ("decoder", i)
            h = ar_block(h, z, blk, self.cfg.attention, self_mask, cross_mask, ctx)
        return nx.add(nx.matmul(self.dec_ln(h), self.out_w), self.out_b)

    def hidden_states(self, ids, z: Tensor) -> np.ndarray:
        """Final decoder states before the output projection, for causality checks."""
        ids = np.atleast_2d(np.asarray(ids))
        n, d = ids.shape[1], self.cfg.d_model
        h = nx.add(nx.scale(nx.embedding_lookup(self.embed, ids), math.sqrt(d)), Tensor(nx.sinusoidal_pe(n, d)))
        for blk in self.dec_blocks:
            h = ar_block(h, z, blk, self.cfg.attention, AttentionMask.causal(n), None, INFERENCE)
        return self.dec_ln(h).data


def ar_forward_step(prefix_ids, z, model: ArBaselineModel) -> np.ndarray:
    """Next-token distribution after ``prefix_ids`` (which must start with ``<sos>``)."""
    prefix_ids = list(prefix_ids)
    if not prefix_ids or prefix_ids[0] != SOS:
        raise ValueError("prefix must start with <sos>")
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z)[None] if np.ndim(z) == 2 else z)
    logits = model.decode_prefix([prefix_ids], zt)
    return nx.softmax_rows(logits).data[0, -1]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def ar_beam_search(step_logprobs, beam: int, max_len: int) -> list[int]:
    """Beam search over a step function ``prefix -> log-probs over V``.

    Hypotheses are ranked by summed log-probability and finish at ``<eos>``.
    Search stops once no live hypothesis can beat the best finished one
    (log-probabilities only decrease), when none are left, or at ``max_len``
    emitted tokens. Each live hypothesis costs one ``step_logprobs`` call per
    step. Returns the best hypothesis without ``<sos>``/``<eos>``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [((SOS,), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        cand = []
        for prefix, score in live:
            lp = step_logprobs(prefix)
            for tok in np.argsort(-lp, kind="stable")[:beam]:
                cand.append((prefix + (int(tok),), score + float(lp[tok])))
        cand.sort(key=lambda c: -c[1])  # stable: ties keep expansion order
        live = []
        for seq, score in cand[:beam]:
            if seq[-1] == EOS:
                finished.append((seq, score))
            else:
                live.append((seq, score))
        if not live:
            break
        if finished and max(s for _, s in finished) >= live[0][1]:
            break
    if not finished:
        finished = live
    best = max(finished, key=lambda c: c[1])[0]
    return [t for t in best[1:] if t != EOS]


def ar_beam_decode(features, model: ArBaselineModel, beam: int = 10, max_len: int | None = None) -> list[int]:
    x, lengths = _as_batch(features)
    z, _ = model.encode(x, lengths)
    max_len = model.cfg.max_len - 1 if max_len is None else max_len

    def step(prefix):
        return _log_softmax(model.decode_prefix([list(prefix)], z).data[0, -1])

    return ar_beam_search(step, beam, max_len)


def ar_greedy_decode(features, model: ArBaselineModel, max_len: int | None = None) -> list[int]:
    return ar_beam_decode(features, model, beam=1, max_len=max_len)
