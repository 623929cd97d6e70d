"""Mini-batch training with gradient accumulation, per-epoch checkpoints and averaging."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..attention import Context
from ..checkpoint import average_states, load_state, save_checkpoint, state_dict
from ..data import EOS, SOS, Batch, Utterance, batchify
from ..model import ArBaselineModel, LasoModel
from ..numerics import Tape, Tensor
from .augment import SpecAugmentConfig, spec_augment
from .losses import combined_loss, cross_entropy_from_logits, distill_mse
from .optim import Adam, lr_schedule
from .teacher import TeacherCache

log = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "nll", "mse", "combined", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    warmup_steps: int = 400
    lr_factor: float = 1.0
    label_smoothing: float = 0.1
    lam: float = 0.0
    accum_steps: int = 1
    batch_seconds: float = 10.0
    seed: int = 0
    specaug: SpecAugmentConfig | None = None
    avg_last_k: int = 5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.accum_steps < 1 or self.epochs < 1 or self.avg_last_k < 1:
            raise ValueError("accum_steps, epochs and avg_last_k must be >= 1")


@dataclass
class FitResult:
    model: object
    trace: list[dict] = field(default_factory=list)
    epoch_states: list[dict[str, np.ndarray]] = field(default_factory=list)  # the averaged last-k
    checkpoint_paths: list[Path] = field(default_factory=list)


def duration_batches(corpus: Sequence[Utterance], order: np.ndarray, batch_seconds: float) -> list[list[Utterance]]:
    """Consecutive groups (in ``order``) holding about ``batch_seconds`` of audio each."""
    batches, cur, dur = [], [], 0.0
    for i in order:
        u = corpus[i]
        cur.append(u)
        dur += u.duration_seconds
        if dur >= batch_seconds:
            batches.append(cur)
            cur, dur = [], 0.0
    if cur:
        batches.append(cur)
    return batches


def laso_loss(model: LasoModel, batch: Batch, ctx: Context, eps: float, lam: float, teacher: TeacherCache | None):
    logits, hidden = model.run((batch.features, batch.lengths), ctx)
    nll = cross_entropy_from_logits(logits, batch.targets, eps)
    mse = None
    if lam > 0 and teacher is not None:
        mse = distill_mse(hidden, teacher.batch(batch.ids), batch.valid_lens, model.teacher_proj)
    return combined_loss(nll, mse, lam), nll, mse


def ar_io(batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs ``<sos> y``, targets ``y <eos>`` and their validity weights."""
    n = max(len(t) for t in batch.tokens) + 1
    inputs = np.full((len(batch.tokens), n), EOS, dtype=np.int64)
    targets = np.full_like(inputs, EOS)
    weights = np.zeros(inputs.shape)
    for i, toks in enumerate(batch.tokens):
        inputs[i, : len(toks) + 1] = [SOS, *toks]
        targets[i, : len(toks) + 1] = [*toks, EOS]
        weights[i, : len(toks) + 1] = 1.0
    return inputs, targets, weights


def ar_loss(model: ArBaselineModel, batch: Batch, ctx: Context, eps: float):
    z, z_len = model.encode(Tensor(batch.features), batch.lengths, ctx)
    inputs, targets, weights = ar_io(batch)
    logits = model.decode_prefix(inputs, z, z_len, ctx)
    nll = cross_entropy_from_logits(logits, targets, eps, weights=weights)
    return nll, nll, None


def fit(
    corpus: Sequence[Utterance],
    model,
    cfg: TrainConfig,
    teacher: TeacherCache | None = None,
    out_dir=None,
    run_config: dict | None = None,
) -> FitResult:
    """Train ``model`` in place; on return it holds the mean of the last ``avg_last_k`` epoch states."""
    is_laso = isinstance(model, LasoModel)
    with_sos = is_laso and model.cfg.distill
    params = model.parameters()
    opt = Adam(params)
    shuffle_rng = np.random.default_rng([cfg.seed, 11])
    aug_rng = np.random.default_rng([cfg.seed, 12])
    drop_rng = np.random.default_rng([cfg.seed, 13])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = FitResult(model)
    recent: deque = deque(maxlen=cfg.avg_last_k)
    d_model = model.cfg.d_model
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        batches = duration_batches(corpus, shuffle_rng.permutation(len(corpus)), cfg.batch_seconds)
        acc = {"nll": 0.0, "mse": 0.0, "combined": 0.0}
        n_acc = 0
        opt.zero_grad()
        for bi, utts in enumerate(batches):
            feats = None
            if cfg.specaug is not None:
                feats = [spec_augment(u.features, cfg.specaug, aug_rng) for u in utts]
            batch = batchify(utts, model.cfg.max_len, with_sos, features=feats)
            ctx = Context(train=True, rng=drop_rng)
            with Tape() as tape:
                if is_laso:
                    loss, nll, mse = laso_loss(model, batch, ctx, cfg.label_smoothing, cfg.lam, teacher)
                else:
                    loss, nll, mse = ar_loss(model, batch, ctx, cfg.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at optimizer step {step + 1} (epoch {epoch}, batch {bi})")
            tape.backward(loss)
            acc["nll"] += nll.item()
            acc["mse"] += mse.item() if mse is not None else 0.0
            acc["combined"] += value
            n_acc += 1
            if n_acc == cfg.accum_steps or bi == len(batches) - 1:
                step += 1
                lr = lr_schedule(step, d_model, cfg.warmup_steps, cfg.lr_factor)
                opt.step(lr, grad_scale=1.0 / n_acc)
                opt.zero_grad()
                row = {"step": step, **{k: v / n_acc for k, v in acc.items()}, "lr": lr}
                result.trace.append(row)
                acc = {k: 0.0 for k in acc}
                n_acc = 0
        snap = state_dict(model)
        recent.append(snap)
        if out_dir is not None:
            path = out_dir / f"epoch{epoch:03d}.npz"
            save_checkpoint(path, model, step, run_config, opt.state_dict())
            result.checkpoint_paths.append(path)
        last = result.trace[-1]
        log.info("epoch %d step %d nll %.4f mse %.4f lr %.2e", epoch, step, last["nll"], last["mse"], last["lr"])

    result.epoch_states = list(recent)
    load_state(model, average_states(result.epoch_states))
    if out_dir is not None:
        save_checkpoint(out_dir / "final.npz", model, step, run_config)
        write_trace(result.trace, out_dir / "loss.csv")
    return result


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in TRACE_FIELDS})
