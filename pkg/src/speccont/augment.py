"""SpecAugment-style masking on log-mel spectrograms.

Masked cells are filled with the frontend's log floor, the value silence
already takes, so masking never introduces out-of-distribution magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AugmentConfig", "apply_spec_augment"]


@dataclass(frozen=True)
class AugmentConfig:
    freq_mask_count: int = 2
    freq_mask_max: int = 27
    time_mask_count: int = 10
    time_mask_max: int = 40
    time_mask_max_ratio: float = 0.05


def apply_spec_augment(
    logmel: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, fill: float
) -> np.ndarray:
    """Return a masked copy; the input is never modified.

    Each time mask is capped at both time_mask_max frames and
    time_mask_max_ratio of the utterance, so short clips keep most of their
    content.  Mask widths of zero are allowed draws.
    """
    out = logmel.copy()
    t, f = out.shape

    for _ in range(cfg.freq_mask_count):
        width = int(rng.integers(0, min(cfg.freq_mask_max, f) + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, f - width + 1))
        out[:, start : start + width] = fill

    t_cap = min(cfg.time_mask_max, int(cfg.time_mask_max_ratio * t))
    for _ in range(cfg.time_mask_count):
        width = int(rng.integers(0, t_cap + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, t - width + 1))
        out[start : start + width, :] = fill

    return out
