"""Training objective: text cross-entropy plus delta-regression reconstruction.

The reconstruction term compares raw frames, first-order frequency
differences, and time differences of orders 1..K, each under an L1 + squared
L2 penalty, so the prediction must match the target's local shape and not
just its pointwise values.  Reductions are sums over elements per example
and means over the batch.

Cross-entropy is a plain sum over target positions, which makes it additive
over any split of the target sequence; nothing here needs to know where the
prompt's text ends and the continuation's begins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

__all__ = [
    "LossBreakdown",
    "ce_loss",
    "delta_time",
    "delta_feat",
    "l1_plus_l2",
    "recon_loss",
    "total_loss",
]


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components of one training step, as plain floats."""

    ce: float
    recon_s: float
    recon_f: float
    recon_t: float
    recon: float
    total: float
    lambda_r: float
    order: int

    def __post_init__(self):
        for name in ("ce", "recon_s", "recon_f", "recon_t", "recon", "total"):
            if not np.isfinite(getattr(self, name)):
                raise ad.NonFiniteError(f"loss component '{name}' is not finite")


def _batchify(x: Tensor) -> tuple[Tensor, int]:
    """Lift (T, F) to (1, T, F); returns the batch size either way."""
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), 1
    if x.ndim == 3:
        return x, x.shape[0]
    raise ShapeMismatchError(f"expected 2-D or 3-D spectrogram tensor, got {x.shape}")


def ce_loss(logits: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of targets; mean over the batch.

    logits: (N, V) or (B, N, V); targets: matching integer ids.
    """
    ids = np.asarray(targets)
    if logits.ndim == 2:
        batch = 1
        ids = ids.reshape(-1)
        if ids.shape[0] != logits.shape[0]:
            raise ShapeMismatchError(f"{logits.shape[0]} logit rows vs {ids.shape[0]} targets")
    elif logits.ndim == 3:
        batch = logits.shape[0]
        if ids.shape != logits.shape[:2]:
            raise ShapeMismatchError(f"targets {ids.shape} do not match logits {logits.shape}")
        ids = ids.reshape(-1)
    else:
        raise ShapeMismatchError(f"logits must be 2-D or 3-D, got {logits.shape}")
    v = logits.shape[-1]
    logp = ad.log_softmax(logits.reshape((-1, v)), axis=-1)
    return -ad.pick(logp, ids).sum() / batch


def delta_time(z: Tensor, k: int) -> Tensor:
    """Offset-k difference along time: out[t] = z[t] - z[t+k]."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    t = z.shape[-2]
    if not 1 <= k < t:
        raise ValueError(f"time delta order k={k} must satisfy 1 <= k < T={t}")
    return z[..., : t - k, :] - z[..., k:, :]


def delta_feat(z: Tensor, k: int) -> Tensor:
    """Offset-k difference along frequency: out[:, c] = z[:, c] - z[:, c+k]."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    f = z.shape[-1]
    if not 1 <= k < f:
        raise ValueError(f"feature delta order k={k} must satisfy 1 <= k < F={f}")
    return z[..., : f - k] - z[..., k:]


def l1_plus_l2(z: Tensor, z_prime: Tensor) -> Tensor:
    """Sum of absolute differences plus sum of squared differences."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    z_prime = z_prime if isinstance(z_prime, Tensor) else Tensor(z_prime)
    if z.shape != z_prime.shape:
        raise ShapeMismatchError(f"l1_plus_l2: shapes {z.shape} vs {z_prime.shape}")
    d = z - z_prime
    return d.abs().sum() + d.square().sum()


def recon_loss(
    x_c: Tensor, x_hat: Tensor, order: int = 3, include_deltas: bool = True
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(recon_s, recon_f, recon_t, recon); per-example sums, batch means.

    include_deltas=False zeroes the frequency and time terms (the "- (L_f +
    L_t)" ablation), leaving the plain frame regression.
    """
    x_c = x_c if isinstance(x_c, Tensor) else Tensor(x_c)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x_c.shape != x_hat.shape:
        raise ShapeMismatchError(f"recon_loss: shapes {x_c.shape} vs {x_hat.shape}")
    xb, batch = _batchify(x_c)
    hb, _ = _batchify(x_hat)
    t = xb.shape[1]
    if order >= t:
        raise ValueError(f"derivative order K={order} must be < T={t}")

    s = l1_plus_l2(xb, hb) / batch
    if include_deltas:
        f = l1_plus_l2(delta_feat(xb, 1), delta_feat(hb, 1)) / batch
        terms = [l1_plus_l2(delta_time(xb, k), delta_time(hb, k)) for k in range(1, order + 1)]
        tt = terms[0]
        for term in terms[1:]:
            tt = tt + term
        tt = tt / batch
    else:
        f = Tensor(np.zeros((), dtype=np.float32))
        tt = Tensor(np.zeros((), dtype=np.float32))
    return s, f, tt, s + f + tt


def total_loss(ce: Tensor | float, recon: Tensor | float, lambda_r: float) -> Tensor | float:
    if lambda_r < 0:
        raise ValueError(f"lambda_r must be >= 0, got {lambda_r}")
    return ce + lambda_r * recon
