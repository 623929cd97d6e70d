"""One-pass decoding, character error rate, and the NAR-vs-AR latency benchmark."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import EOS, SOS, Utterance, pad_features
from .model import ArBaselineModel, LasoModel, ar_beam_decode


@dataclass
class Hypothesis:
    tokens: list[int]
    confidence: list[float]


def strip_fillers(ids: Sequence[int], with_sos: bool) -> list[int]:
    """Drop a leading ``<sos>``, cut at the first ``<eos>``, drop stray ``<sos>``."""
    ids = list(ids)
    if with_sos and ids and ids[0] == SOS:
        ids = ids[1:]
    if EOS in ids:
        ids = ids[: ids.index(EOS)]
    return [i for i in ids if i != SOS]


def hypothesis_from_probs(probs: np.ndarray, with_sos: bool) -> Hypothesis:
    """Per-slot argmax (ties to the lowest id) followed by filler stripping."""
    best = probs.argmax(axis=-1)
    conf = probs.max(axis=-1)
    keep = []
    start = 1 if with_sos and best[0] == SOS else 0
    for i in range(start, len(best)):
        if best[i] == EOS:
            break
        if best[i] != SOS:
            keep.append(i)
    return Hypothesis([int(best[i]) for i in keep], [float(conf[i]) for i in keep])


def greedy_decode(features, model: LasoModel) -> Hypothesis:
    probs = model.probs(features)[0]
    return hypothesis_from_probs(probs, model.cfg.distill)


def greedy_decode_batch(features: Sequence[np.ndarray], model: LasoModel) -> list[Hypothesis]:
    probs = model.probs(pad_features(features))
    return [hypothesis_from_probs(p, model.cfg.distill) for p in probs]


# ---------------------------------------------------------------------------
# Edit distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditStats:
    distance: int
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def rate(self) -> float:
        return self.distance / self.ref_len


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int, int]:
    """Unit-cost Levenshtein distance with a (subs, ins, dels) breakdown of one optimal script."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(d[n, m]), int(s), ins, dels


def cer(ref: Sequence, hyp: Sequence) -> EditStats:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    dist, s, i, d = edit_distance(ref, hyp)
    return EditStats(dist, s, i, d, len(ref))


@dataclass
class EvalResult:
    per_utterance: list[tuple[str, EditStats, list[int]]]

    @property
    def total_distance(self) -> int:
        return sum(r[1].distance for r in self.per_utterance)

    @property
    def total_ref(self) -> int:
        return sum(r[1].ref_len for r in self.per_utterance)

    @property
    def cer(self) -> float:
        return self.total_distance / self.total_ref


def evaluate(corpus: Sequence[Utterance], model: LasoModel, batch_size: int = 32) -> EvalResult:
    """Micro-averaged CER: total edit distance over total reference length."""
    rows = []
    for start in range(0, len(corpus), batch_size):
        chunk = corpus[start : start + batch_size]
        hyps = greedy_decode_batch([u.features for u in chunk], model)
        for u, h in zip(chunk, hyps):
            rows.append((u.id, cer(u.tokens, h.tokens), h.tokens))
    return EvalResult(rows)


def write_eval_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "distance", "substitutions", "insertions", "deletions", "ref_len", "rate"])
        for uid, st, _ in result.per_utterance:
            w.writerow([uid, st.distance, st.substitutions, st.insertions, st.deletions, st.ref_len, repr(st.rate)])


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    total_processing_seconds: float
    total_audio_seconds: float
    n_utterances: int
    timings: list[float] = field(default_factory=list)

    @property
    def rtf(self) -> float:
        return self.total_processing_seconds / self.total_audio_seconds

    @property
    def apt(self) -> float:
        return self.total_processing_seconds / self.n_utterances


@dataclass
class BenchResult:
    nar: BenchReport
    ar: BenchReport
    nar_decoder_passes: int
    ar_decoder_passes: int
    ar_hyp_tokens: int
    beam: int

    @property
    def speedup_apt(self) -> float:
        return self.ar.apt / self.nar.apt

    @property
    def speedup_rtf(self) -> float:
        return self.ar.rtf / self.nar.rtf


def _time_pass(corpus, decode) -> list[float]:
    out = []
    for u in corpus:
        t0 = time.perf_counter()
        decode(u.features)
        out.append(time.perf_counter() - t0)
    return out


def _median_report(passes: list[list[float]], audio: float) -> BenchReport:
    totals = [sum(p) for p in passes]
    k = sorted(range(len(totals)), key=totals.__getitem__)[(len(totals) - 1) // 2]
    return BenchReport(totals[k], audio, len(passes[k]), passes[k])


def benchmark(
    corpus: Sequence[Utterance], laso: LasoModel, ar: ArBaselineModel, beam: int = 10, repeats: int = 5
) -> BenchResult:
    """Utterance-by-utterance wall-clock timing of both decoders, single-threaded.

    Each system is timed over ``repeats`` passes and the median-total pass is
    reported. Decoder-pass counts come from one extra untimed-overhead pass.
    """
    if not corpus:
        raise ValueError("benchmark needs a non-empty corpus")
    audio = sum(u.duration_seconds for u in corpus)
    with threadpool_limits(limits=1):
        nar_passes = [_time_pass(corpus, lambda f: greedy_decode(f, laso)) for _ in range(repeats)]
        ar_passes = [_time_pass(corpus, lambda f: ar_beam_decode(f, ar, beam)) for _ in range(repeats)]
    laso.counter.clear()
    ar.counter.clear()
    hyp_tokens = 0
    for u in corpus:
        greedy_decode(u.features, laso)
        hyp_tokens += len(ar_beam_decode(u.features, ar, beam))
    return BenchResult(
        nar=_median_report(nar_passes, audio),
        ar=_median_report(ar_passes, audio),
        nar_decoder_passes=laso.counter["decoder_passes"],
        ar_decoder_passes=ar.counter["decoder_passes"],
        ar_hyp_tokens=hyp_tokens,
        beam=beam,
    )


BENCH_FIELDS = ("system", "total_processing_seconds", "total_audio_seconds", "n_utterances", "rtf", "apt", "decoder_passes")


def write_bench_csv(res: BenchResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_FIELDS)
        for name, rep, passes in (("nar", res.nar, res.nar_decoder_passes), ("ar", res.ar, res.ar_decoder_passes)):
            w.writerow([name, repr(rep.total_processing_seconds), repr(rep.total_audio_seconds), rep.n_utterances,
                        repr(rep.rtf), repr(rep.apt), passes])


def bench_summary(res: BenchResult) -> str:
    return "\n".join([
        f"NAR  RTF {res.nar.rtf:.5f}  APT {res.nar.apt * 1e3:.2f} ms  decoder passes {res.nar_decoder_passes}",
        f"AR   RTF {res.ar.rtf:.5f}  APT {res.ar.apt * 1e3:.2f} ms  decoder passes {res.ar_decoder_passes} (beam {res.beam})",
        f"speedup_apt {res.speedup_apt!r}",
        f"speedup_rtf {res.speedup_rtf!r}",
    ])
