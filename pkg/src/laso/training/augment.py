from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpecAugmentConfig:
    freq_width: int = 8
    time_width: int = 10
    n_freq_masks: int = 2
    n_time_masks: int = 2


def spec_augment(features: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero random bands of feature channels and of frames. No time warping.

    Each mask width is drawn uniformly from 0..max width (clipped to the
    input size) and its start uniformly among the positions where it fits.
    """
    out = np.array(features, dtype=np.float64, copy=True)
    t0, d = out.shape
    for _ in range(cfg.n_freq_masks):
        f = int(rng.integers(0, min(cfg.freq_width, d) + 1))
        f0 = int(rng.integers(0, d - f + 1))
        out[:, f0 : f0 + f] = 0.0
    for _ in range(cfg.n_time_masks):
        w = int(rng.integers(0, min(cfg.time_width, t0) + 1))
        w0 = int(rng.integers(0, t0 - w + 1))
        out[w0 : w0 + w, :] = 0.0
    return out
