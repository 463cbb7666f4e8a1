"""Stochastic input corruption used during training.

Three schemes, all applied on the fly (never materialized to disk):

* additive Gaussian noise with standard deviation ``sigma``,
* mixed-structure blending ``(1 - alpha) * x + alpha * x_r`` with a
  partner ``x_r`` drawn uniformly from the training pool excluding the
  sample itself (by pool index, so duplicate-valued samples are legal
  partners),
* their combination.

Partners are re-drawn independently at every presentation of a sample.
Inference never corrupts: corruption is a training-only device.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng

VARIANTS = ("SAE", "SDAE", "SAE-MSR", "SDAE-MSR")

# per-variant (alpha, sigma); lam/gamma live in LossConfig
_VARIANT_TABLE = {
    "SAE": (0.0, 0.0),
    "SDAE": (0.0, 0.1),
    "SAE-MSR": (0.1, 0.0),
    "SDAE-MSR": (0.1, 0.001),
}


def _variant_tag(alpha: float, sigma: float) -> str:
    if alpha == 0 and sigma == 0:
        return "none"
    if alpha == 0:
        return "noise"
    if sigma == 0:
        return "msr"
    return "msr+noise"


@dataclass(frozen=True)
class CorruptionSpec:
    """Mix weight ``alpha`` in [0, 1] and noise stddev ``sigma`` >= 0."""

    alpha: float
    sigma: float
    variant: str = field(default="")

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        derived = _variant_tag(self.alpha, self.sigma)
        if self.variant and self.variant != derived:
            raise ValueError(
                f"variant tag {self.variant!r} inconsistent with "
                f"alpha={self.alpha}, sigma={self.sigma} (expected {derived!r})"
            )
        object.__setattr__(self, "variant", derived)


def spec_for_variant(name: str) -> CorruptionSpec:
    """Corruption settings for one of the four autoencoder variants."""
    if name not in _VARIANT_TABLE:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    alpha, sigma = _VARIANT_TABLE[name]
    return CorruptionSpec(alpha=alpha, sigma=sigma)


def corrupt(spec: CorruptionSpec, x: np.ndarray, pool: np.ndarray, rng: Rng,
            self_index: int | None = None) -> tuple[np.ndarray, int | None]:
    """Corrupt a single sample; returns (corrupted, partner pool index).

    ``pool`` is the training array ``[n, ...]`` the sample was drawn from
    and ``self_index`` its position there, required whenever ``alpha > 0``
    so the partner can exclude the sample itself.
    """
    partner = None
    out = x
    if spec.alpha > 0:
        n = len(pool)
        if self_index is None:
            raise ValueError("mixed-structure corruption requires the sample's pool index")
        if n < 2:
            raise ValueError("mixed-structure corruption requires at least two pool samples")
        draw = int(rng.integers(0, n - 1))
        partner = draw + (1 if draw >= self_index else 0)
        out = (1.0 - spec.alpha) * x + spec.alpha * pool[partner]
        out = out.astype(x.dtype)
    if spec.sigma > 0:
        out = out + rng.normal(x.shape, 0.0, spec.sigma, dtype=x.dtype)
    if out is x:
        out = x.copy()
    return out, partner


def corrupt_batch(spec: CorruptionSpec, batch: np.ndarray, pool: np.ndarray,
                  self_indices: np.ndarray, rng: Rng) -> tuple[np.ndarray, np.ndarray | None]:
    """Vectorized corruption of a minibatch drawn from ``pool``.

    Deterministic given the rng state: one partner draw per sample (when
    ``alpha > 0``), then one noise draw for the whole batch (when
    ``sigma > 0``).
    """
    out = batch.astype(batch.dtype, copy=True)
    partners = None
    if spec.alpha > 0:
        n = len(pool)
        if n < 2:
            raise ValueError("mixed-structure corruption requires at least two pool samples")
        draws = rng.integers(0, n - 1, size=len(batch))
        partners = draws + (draws >= np.asarray(self_indices)).astype(draws.dtype)
        out = ((1.0 - spec.alpha) * out + spec.alpha * pool[partners]).astype(batch.dtype)
    if spec.sigma > 0:
        out = out + rng.normal(batch.shape, 0.0, spec.sigma, dtype=batch.dtype)
    return out, partners
