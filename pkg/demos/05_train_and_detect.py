"""Train a small autoencoder on normal patches, then grade abnormality.

The detector never sees diseased data during training. Calibration pools
the voxelwise reconstruction errors of held-out normal patches into one
(mu, sigma); a patch's abnormality grade is the number of voxels whose
error exceeds mu + 3 sigma. Takes about a minute on a laptop core.
"""

import numpy as np

from msrae import corrupt, detect, experiment, model, phantom, train
from msrae.tensor import Rng

cfg = experiment.desk_config()
spec = phantom.CohortSpec(
    n_subjects=5, k_folds=5, patch_shape=(4, 12, 12),
    strata=(phantom.Stratum(0.0, 0.2, 20), phantom.Stratum(0.7, 0.9, 10)),
    appearance=cfg.cohort.appearance, seed=21, name="demo")
cohort = phantom.build_cohort(spec)

rng = Rng(100)
params = model.init_params(cfg.model, rng.split(0))
pool, _ = cohort.train_pool(fold=0)
print(f"training pool: {pool.shape[0]} normal patches of shape {pool.shape[1:]}")

schedule = train.TrainConfig(stages=(train.Stage(6, 50, 0.001),), batch_size=32)
_, log = train.train(params, pool, corrupt.spec_for_variant("SDAE-MSR"),
                     cfg.loss, schedule, rng.split(1))
print("per-epoch reconstruction loss:",
      " ".join(f"{r['mean_recon']:.4f}" for r in log))

normals = cohort.normal_patches(fold=0, split="val")
stats = detect.calibrate(params, normals)
print(f"\ncalibration on {len(normals)} validation normals: "
      f"mu={stats.mu:.4f} sigma={stats.sigma:.4f} -> threshold {stats.threshold:.4f}")

rows = [r for r in cohort.eval_rows(fold=0) if r.split == "test"]
grades = detect.score_patches(params, stats, np.stack([r.tensor for r in rows]))
normal_scores = [int(g) for g, r in zip(grades, rows) if r.stenosis_grade < 0.2]
severe_scores = [int(g) for g, r in zip(grades, rows) if r.stenosis_grade > 0.7]
print(f"\nabnormality grades (voxels above threshold, of {rows[0].tensor.size}):")
print(f"  normal patches: median {np.median(normal_scores):.0f} "
      f"range [{min(normal_scores)}, {max(normal_scores)}]")
print(f"  severe patches: median {np.median(severe_scores):.0f} "
      f"range [{min(severe_scores)}, {max(severe_scores)}]")
