"""Momentum SGD with a staged schedule and on-the-fly corruption.

Each stage fixes (epochs, minibatches per epoch, learning rate); stages
run in order and the velocity buffer persists across stage boundaries.
Minibatches are drawn uniformly with replacement from the training pool,
so the number of gradient steps per epoch is independent of pool size.
``TrainConfig.scale`` rescales epoch counts (minimum 1 per stage) for
reduced desk-scale runs without touching the per-epoch step counts.

The update is the classical heavy-ball form::

    v <- momentum * v - lr * grad
    theta <- theta + v
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import corrupt as corrupt_mod
from . import model as model_mod
from .tensor import Rng

FULL_STAGES = ((100, 100, 0.001), (80, 200, 0.0005), (60, 300, 0.00025), (40, 500, 0.0001))

LOG_COLUMNS = ("stage", "epoch", "mean_total_loss", "mean_recon",
               "mean_weight_penalty", "mean_sparsity", "learning_rate", "wall_ms")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; carries a diagnostic snapshot."""

    def __init__(self, stage: int, epoch: int, batch_ids: list):
        self.stage, self.epoch, self.batch_ids = stage, epoch, batch_ids
        super().__init__(
            f"non-finite loss at stage {stage}, epoch {epoch}; batch ids {batch_ids}"
        )


@dataclass(frozen=True)
class Stage:
    epochs: int
    minibatches: int
    learning_rate: float

    def __post_init__(self):
        # learning_rate 0 is allowed as a null-update diagnostic
        if self.epochs < 1 or self.minibatches < 1 or self.learning_rate < 0:
            raise ValueError(f"stage counts must be positive: {self}")


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[Stage, ...] = field(
        default_factory=lambda: tuple(Stage(*s) for s in FULL_STAGES))
    momentum: float = 0.9
    batch_size: int = 32
    scale: float = 1.0

    def __post_init__(self):
        stages = tuple(s if isinstance(s, Stage) else Stage(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def scaled_stages(self) -> tuple[Stage, ...]:
        """Stages with epoch counts rescaled by ``scale`` (minimum 1)."""
        return tuple(
            Stage(max(1, int(round(s.epochs * self.scale))), s.minibatches, s.learning_rate)
            for s in self.stages
        )

    def total_steps(self) -> int:
        return sum(s.epochs * s.minibatches for s in self.scaled_stages())


def init_velocity(params: model_mod.ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.param_items()}


def sgd_momentum_step(params: model_mod.ModelParams, grads: dict[str, np.ndarray],
                      velocity: dict[str, np.ndarray], lr: float, momentum: float):
    """One in-place heavy-ball update; returns (params, velocity)."""
    for name, arr in params.param_items():
        g = grads[name]
        if g.shape != arr.shape:
            raise model_mod.ShapeError(f"gradient {name}: {g.shape} != {arr.shape}")
        v = velocity[name]
        v *= momentum
        v -= (lr * g).astype(v.dtype)
        arr += v
    return params, velocity


def schedule_header(cfg: TrainConfig, **extra) -> list[str]:
    """Comment lines describing the effective schedule, written atop log CSVs."""
    lines = []
    for i, s in enumerate(cfg.scaled_stages(), start=1):
        lines.append(
            f"# schedule stage={i} epochs={s.epochs} minibatches={s.minibatches} "
            f"learning_rate={s.learning_rate!r}"
        )
    params = [f"momentum={cfg.momentum!r}", f"batch_size={cfg.batch_size}", f"scale={cfg.scale!r}"]
    params += [f"{k}={v}" for k, v in extra.items()]
    lines.append("# " + " ".join(params))
    return lines


def write_log_csv(path, rows: list[dict], header_lines: list[str] | None = None) -> None:
    with open(path, "w", newline="") as fp:
        for line in header_lines or []:
            fp.write(line + "\n")
        writer = csv.writer(fp)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in LOG_COLUMNS])


def read_log_csv(path) -> tuple[list[str], list[dict]]:
    header_lines, rows = [], []
    with open(path, newline="") as fp:
        lines = [ln.rstrip("\n") for ln in fp]
    body = []
    for ln in lines:
        (header_lines if ln.startswith("#") else body).append(ln)
    reader = csv.DictReader(body)
    for rec in reader:
        row = dict(rec)
        for key in LOG_COLUMNS[2:]:
            row[key] = float(row[key])
        row["stage"], row["epoch"] = int(row["stage"]), int(row["epoch"])
        rows.append(row)
    return header_lines, rows


def train(params: model_mod.ModelParams, pool: np.ndarray,
          corruption: corrupt_mod.CorruptionSpec, loss_cfg: model_mod.LossConfig,
          cfg: TrainConfig, rng: Rng, pool_ids: list | None = None,
          on_epoch=None) -> tuple[model_mod.ModelParams, list[dict]]:
    """Train in place on ``pool`` ([n, 1, D, H, W]); returns (params, log rows).

    Randomness is drawn from two child streams of ``rng``: split(0) for
    minibatch indices and split(1) for corruption, keeping the two
    deterministic and independent of each other's call counts.
    """
    pool = np.asarray(pool)
    if pool.ndim != 5 or len(pool) == 0:
        raise ValueError(f"training pool must be a non-empty [n, c, D, H, W] array, got {pool.shape}")
    rng_batch, rng_corrupt = rng.split(0), rng.split(1)
    velocity = init_velocity(params)
    n = len(pool)
    log: list[dict] = []
    for stage_no, stage in enumerate(cfg.scaled_stages(), start=1):
        for epoch in range(1, stage.epochs + 1):
            t0 = time.perf_counter()
            sums = np.zeros(4, dtype=np.float64)  # total, recon, weight, sparsity
            for _ in range(stage.minibatches):
                idx = rng_batch.integers(0, n, size=cfg.batch_size)
                batch = pool[idx]
                corrupted, _ = corrupt_mod.corrupt_batch(corruption, batch, pool, idx, rng_corrupt)
                total, comps, grads = model_mod.loss_backward(params, batch, corrupted, loss_cfg)
                if not np.isfinite(total):
                    ids = [pool_ids[i] if pool_ids is not None else int(i) for i in idx]
                    raise TrainingDivergedError(stage_no, epoch, ids)
                sums += (total, comps.recon, comps.weight_penalty, comps.sparsity)
                sgd_momentum_step(params, grads, velocity, stage.learning_rate, cfg.momentum)
            means = sums / stage.minibatches
            row = {
                "stage": stage_no,
                "epoch": epoch,
                "mean_total_loss": float(means[0]),
                "mean_recon": float(means[1]),
                "mean_weight_penalty": float(means[2]),
                "mean_sparsity": float(means[3]),
                "learning_rate": stage.learning_rate,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            log.append(row)
            if on_epoch is not None:
                on_epoch(row)
    return params, log
