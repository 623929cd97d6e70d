"""Synthetic speech-like corpus, vocabulary, binary corpus files and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

EOS, SOS, UNK = 0, 1, 2
SPECIALS = ("<eos>", "<sos>", "<unk>")
FRAME_SHIFT = 0.01  # seconds per feature frame

MAGIC = b"LASO"
FORMAT_VERSION = 1


class DataError(ValueError):
    pass


class FormatError(DataError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class Vocabulary:
    """Ordered token list; ids 0, 1, 2 are ``<eos>``, ``<sos>``, ``<unk>``."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            raise DataError(f"vocabulary must start with {SPECIALS}, got {tokens[:3]}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        return cls(list(SPECIALS) + [f"w{i:02d}" for i in range(size - len(SPECIALS))])

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T0, D_feat]
    tokens: list[int]  # no specials

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def duration_seconds(self) -> float:
        return self.n_frames * FRAME_SHIFT


@dataclass
class SyntheticSpec:
    vocab_size: int = 32
    d_feat: int = 40
    frames_per_token: tuple[int, int] = (2, 5)
    noise_sigma: float = 0.3
    n_utterances: int = 2000
    length_range: tuple[int, int] = (3, 20)
    transition_concentration: float = 0.2
    seed: int = 0
    transitions: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_words(self) -> int:
        return self.vocab_size - len(SPECIALS)

    def markov_chain(self) -> tuple[np.ndarray, np.ndarray]:
        """(initial distribution, transition matrix) over word indices.

        Self-transitions are zero so adjacent tokens always differ acoustically.
        """
        rng = np.random.default_rng([self.seed, 1])
        n = self.n_words
        if self.transitions is not None:
            trans = np.asarray(self.transitions, dtype=np.float64)
        else:
            trans = rng.dirichlet(np.full(n - 1, self.transition_concentration), size=n)
            trans = np.stack([np.insert(row, i, 0.0) for i, row in enumerate(trans)])
        init = rng.dirichlet(np.ones(n))
        if trans.shape != (n, n) or not np.allclose(trans.sum(axis=1), 1.0, atol=1e-9):
            raise DataError("transition matrix rows must sum to 1")
        return init, trans

    def prototypes(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 2])
        return rng.standard_normal((self.n_words, self.d_feat))


def generate_corpus(
    spec: SyntheticSpec, max_len: int | None = None, prefix: str = "utt", stream: int = 0
) -> list[Utterance]:
    """Markov-chain transcripts rendered as noisy per-token prototype segments.

    The language (chain and prototypes) depends only on ``spec.seed``;
    ``stream`` selects an independent draw of utterances, e.g. a test split.

    Features are rounded to float32 precision so the binary corpus format
    round-trips exactly.
    """
    lo, hi = spec.length_range
    if max_len is not None and hi > max_len - 2:
        raise DataError(f"longest transcript {hi} does not fit max_len {max_len} (needs <= {max_len - 2})")
    if not 1 <= lo <= hi:
        raise DataError(f"bad length range {spec.length_range}")
    dmin, dmax = spec.frames_per_token
    init, trans = spec.markov_chain()
    cum_init, cum_trans = np.cumsum(init), np.cumsum(trans, axis=1)
    protos = spec.prototypes()
    rng = np.random.default_rng([spec.seed, 3, stream])
    n_words = spec.n_words
    corpus = []
    for u in range(spec.n_utterances):
        n = int(rng.integers(lo, hi + 1))
        words = [min(int(np.searchsorted(cum_init, rng.random(), side="right")), n_words - 1)]
        for _ in range(n - 1):
            row = cum_trans[words[-1]]
            words.append(min(int(np.searchsorted(row, rng.random(), side="right")), n_words - 1))
        durations = rng.integers(dmin, dmax + 1, size=n)
        frames = np.repeat(protos[words], durations, axis=0)
        if spec.noise_sigma > 0:
            frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
        feats = frames.astype(np.float32).astype(np.float64)
        corpus.append(Utterance(f"{prefix}{u:05d}", feats, [w + len(SPECIALS) for w in words]))
    return corpus


def target_ids(tokens: Sequence[int], max_len: int, with_sos: bool) -> np.ndarray:
    """Gold ids for the L token slots: optional ``<sos>``, tokens, then ``<eos>`` fill."""
    seq = ([SOS] if with_sos else []) + list(tokens)
    if len(seq) > max_len - 1:
        raise DataError(f"transcript of {len(tokens)} tokens does not fit max_len {max_len}")
    out = np.full(max_len, EOS, dtype=np.int64)
    out[: len(seq)] = seq
    return out


@dataclass
class Batch:
    features: np.ndarray  # [B, T0max, D_feat], zero padded
    frame_mask: np.ndarray  # [B, T0max] bool
    lengths: np.ndarray  # [B] frame counts
    targets: np.ndarray  # [B, L]
    valid_lens: np.ndarray  # [B] tokens + specials, from optional <sos> to first <eos>
    ids: list[str]
    tokens: list[list[int]]


def pad_features(feats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats])
    out = np.zeros((len(feats), lengths.max(), feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out, lengths


def batchify(utts: Sequence[Utterance], max_len: int, with_sos: bool = False, features=None) -> Batch:
    """Pad a slice of the corpus into one batch. ``features`` overrides the stored ones (augmentation)."""
    if not utts:
        raise DataError("cannot batch an empty slice")
    feats, lengths = pad_features([u.features for u in utts] if features is None else features)
    targets = np.stack([target_ids(u.tokens, max_len, with_sos) for u in utts])
    extra = 2 if with_sos else 1
    return Batch(
        features=feats,
        frame_mask=np.arange(feats.shape[1])[None, :] < lengths[:, None],
        lengths=lengths,
        targets=targets,
        valid_lens=np.array([len(u.tokens) + extra for u in utts]),
        ids=[u.id for u in utts],
        tokens=[list(u.tokens) for u in utts],
    )


# ---------------------------------------------------------------------------
# Binary corpus files (little endian)
# ---------------------------------------------------------------------------


def corpus_file_size(corpus: Sequence[Utterance]) -> int:
    size = 4 + 4 + 4
    for u in corpus:
        t, d = u.features.shape
        size += 2 + len(u.id.encode("utf-8")) + 4 + 4 + 4 * t * d + 2 + 4 * len(u.tokens)
    return size


def save_corpus(corpus: Sequence[Utterance], path) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(corpus))]
    for u in corpus:
        uid = u.id.encode("utf-8")
        t, d = u.features.shape
        parts.append(struct.pack("<H", len(uid)) + uid + struct.pack("<II", t, d))
        parts.append(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
        parts.append(struct.pack("<H", len(u.tokens)))
        parts.append(np.asarray(u.tokens, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_corpus(path) -> list[Utterance]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a corpus file", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (count,) = r.unpack("<I", "utterance count")
    corpus = []
    for _ in range(count):
        (n_id,) = r.unpack("<H", "id length")
        uid = r.take(n_id, "utterance id").decode("utf-8")
        t, d = r.unpack("<II", "feature shape")
        feats = np.frombuffer(r.take(4 * t * d, "features"), dtype="<f4").reshape(t, d).astype(np.float64)
        (n_tok,) = r.unpack("<H", "token count")
        toks = np.frombuffer(r.take(4 * n_tok, "token ids"), dtype="<u4").astype(int).tolist()
        corpus.append(Utterance(uid, feats, toks))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last utterance", r.pos)
    return corpus
