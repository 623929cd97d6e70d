"""Smoothed NLL over the L token slots, valid-span hidden-state MSE, and their sum."""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..data import DataError
from ..numerics import Tensor


def smoothed_targets(targets: np.ndarray, vocab_size: int, eps: float) -> np.ndarray:
    """(1 - eps) on the gold id, eps / (V - 1) on every other id."""
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab_size):
        raise DataError(f"target id out of vocabulary range [0, {vocab_size})")
    dist = np.full(targets.shape + (vocab_size,), eps / (vocab_size - 1))
    np.put_along_axis(dist, targets[..., None], 1.0 - eps, axis=-1)
    return dist


def _position_weights(shape, weights) -> tuple[np.ndarray, float]:
    if weights is None:
        w = np.ones(shape)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), shape)
    return w, float(w.sum())


def nll_loss(probs: Tensor, targets, eps: float = 0.0, weights=None) -> Tensor:
    """Mean smoothed cross-entropy of distributions ``probs`` [..., V].

    Averaged over all positions, padding included, unless ``weights`` says otherwise.
    """
    t = smoothed_targets(targets, probs.shape[-1], eps)
    w, total = _position_weights(probs.shape[:-1], weights)
    p = probs.data
    nz = t > 0
    logp = np.log(np.where(nz, p, 1.0))
    loss = -(w * (t * logp).sum(axis=-1)).sum() / total

    def vjp(g):
        return (-g * w[..., None] * np.where(nz, t / np.where(nz, p, 1.0), 0.0) / total,)

    return nx.emit("nll", np.asarray(loss), (probs,), vjp)


def cross_entropy_from_logits(logits: Tensor, targets, eps: float = 0.0, weights=None) -> Tensor:
    """Same value as ``nll_loss(softmax(logits), ...)`` computed through log-softmax."""
    t = smoothed_targets(targets, logits.shape[-1], eps)
    w, total = _position_weights(logits.shape[:-1], weights)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    loss = -(w * (t * logp).sum(axis=-1)).sum() / total

    def vjp(g):
        return (g * w[..., None] * (np.exp(logp) - t) / total,)

    return nx.emit("cross_entropy", np.asarray(loss), (logits,), vjp)


def smoothing_floor(vocab_size: int, eps: float) -> float:
    """Smallest achievable smoothed NLL: the entropy of the smoothed target."""
    if eps == 0.0:
        return 0.0
    off = eps / (vocab_size - 1)
    return -((1 - eps) * np.log(1 - eps) + (vocab_size - 1) * off * np.log(off))


def pad_teacher(hiddens, width: int | None = None) -> np.ndarray:
    """Stack variable-length teacher outputs into [B, max L_v, D_B] with zero fill."""
    width = width or max(h.shape[0] for h in hiddens)
    out = np.zeros((len(hiddens), width, hiddens[0].shape[1]))
    for i, h in enumerate(hiddens):
        out[i, : h.shape[0]] = h
    return out


def distill_mse(dec_hidden: Tensor, teacher_hidden, valid_lens, projection: Tensor | None = None) -> Tensor:
    """Mean over utterances of (1/L_v) * sum_{i<L_v} ||P h_i - s_i||^2.

    ``dec_hidden`` is [B, L, D_m] (or [L, D_m]); ``teacher_hidden`` is
    [B, >=L_v, D_B] or a list of [L_v, D_B] arrays. Rows at or beyond each
    utterance's ``valid_lens`` entry do not contribute.
    """
    if dec_hidden.ndim == 2:
        dec_hidden = nx.reshape(dec_hidden, (1,) + dec_hidden.shape)
        teacher_hidden = [np.asarray(teacher_hidden)]
    valid = np.atleast_1d(np.asarray(valid_lens))
    if isinstance(teacher_hidden, (list, tuple)):
        for h, lv in zip(teacher_hidden, valid):
            if h.shape[0] != lv:
                raise DataError(f"teacher has {h.shape[0]} rows but decoder valid length is {lv}")
        teacher_hidden = pad_teacher(teacher_hidden)
    b, length = dec_hidden.shape[:2]
    if valid.max() > length:
        raise DataError(f"valid length {valid.max()} exceeds decoder length {length}")
    pred = dec_hidden if projection is None else nx.matmul(dec_hidden, projection)
    s = np.zeros(pred.shape)
    width = min(teacher_hidden.shape[1], length)
    s[:, :width] = teacher_hidden[:, :width]
    row_w = (np.arange(length)[None, :] < valid[:, None]) / (valid[:, None] * b)
    diff = pred.data - s
    loss = (row_w * (diff * diff).sum(axis=-1)).sum()

    def vjp(g):
        return (g * 2.0 * row_w[..., None] * diff,)

    return nx.emit("distill_mse", np.asarray(loss), (pred,), vjp)


def combined_loss(nll: Tensor, mse: Tensor | None, lam: float) -> Tensor:
    if lam == 0.0 or mse is None:
        return nll
    return nx.add(nll, nx.scale(mse, lam))
