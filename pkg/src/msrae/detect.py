"""Reconstruction-error scoring of patches against calibrated normal statistics.

Calibration pools the voxelwise absolute reconstruction errors of every
normal validation patch into one global (mu, sigma) pair, with sigma
population-normalized (1/N).  A patch's abnormality grade is the number
of voxels whose error strictly exceeds ``mu + 3 * sigma``.  Inference is
always corruption-free, whichever corruption the model was trained with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .tensor import ShapeError


@dataclass(frozen=True)
class CalibrationStats:
    mu: float
    sigma: float
    n_voxels: int

    @property
    def threshold(self) -> float:
        return self.mu + 3.0 * self.sigma


def reconstruction_error(params: model_mod.ModelParams, x: np.ndarray) -> np.ndarray:
    """Voxelwise ``|x - reconstruct(x)|`` with x's shape."""
    y = model_mod.reconstruct(params, x)
    return np.abs(x - y)


def _batched_errors(params: model_mod.ModelParams, patches: np.ndarray,
                    batch_size: int = 64):
    """Yield error maps per batch; fixed order for deterministic accumulation."""
    patches = np.asarray(patches)
    if patches.ndim != 5:
        raise ShapeError(f"expected [n, c, D, H, W] patches, got {patches.shape}")
    for start in range(0, len(patches), batch_size):
        yield reconstruction_error(params, patches[start:start + batch_size])


def calibrate(params: model_mod.ModelParams, normals: np.ndarray,
              batch_size: int = 64) -> CalibrationStats:
    """Pooled voxelwise error statistics over all normal patches.

    Accumulates sum and sum of squares in float64 in a fixed batch order,
    so the result is deterministic; sigma is population-normalized.
    """
    normals = np.asarray(normals)
    if len(normals) == 0:
        raise ValueError("calibrate: at least one normal patch required")
    total = 0.0
    total_sq = 0.0
    count = 0
    for err in _batched_errors(params, normals, batch_size):
        e = err.astype(np.float64)
        total += float(e.sum())
        total_sq += float(np.square(e).sum())
        count += e.size
    mu = total / count
    var = max(total_sq / count - mu * mu, 0.0)
    return CalibrationStats(mu=mu, sigma=float(np.sqrt(var)), n_voxels=count)


def abnormality_grade(params: model_mod.ModelParams, stats: CalibrationStats,
                      x: np.ndarray) -> int:
    """Count of voxels with error strictly above ``mu + 3 sigma``."""
    err = reconstruction_error(params, x)
    return int(np.count_nonzero(err > stats.threshold))


def grade_from_error_map(stats: CalibrationStats, err: np.ndarray) -> int:
    return int(np.count_nonzero(err > stats.threshold))


def score_patches(params: model_mod.ModelParams, stats: CalibrationStats,
                  patches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Abnormality grades for a stack of patches (one int per patch)."""
    grades = []
    for err in _batched_errors(params, patches, batch_size):
        flat = err.reshape(len(err), -1)
        grades.append(np.count_nonzero(flat > stats.threshold, axis=1))
    return np.concatenate(grades) if grades else np.zeros(0, dtype=int)
