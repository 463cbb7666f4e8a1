"""Rank metrics with explicit tie handling, and rank-sum significance.

Abnormality grades are small integers, so ties dominate: the AUC counts
tied positive/negative pairs as half, average precision processes each
tie group as one threshold, and the Mann-Whitney test uses midranks with
an exact enumeration mode for small samples.
"""

import numpy as np

from msrae.metrics import ScoredSample, mann_whitney_u, pr_ap, roc_auc
from msrae.tensor import Rng

rng = Rng(9)

# heavily tied integer scores: positives shifted up by ~2
neg = rng.integers(0, 6, size=40)
pos = rng.integers(2, 8, size=25)
samples = ([ScoredSample(float(s), 0) for s in neg]
           + [ScoredSample(float(s), 1) for s in pos])

curve, auc = roc_auc(samples)
print(f"AUC with half-credit ties: {auc:.4f}")
print("threshold sweep (threshold, fpr, tpr):")
for t, fpr, tpr in curve[:6]:
    print(f"  {t:>5} {fpr:.3f} {tpr:.3f}")

pr_curve, ap = pr_ap(samples)
prevalence = len(pos) / (len(pos) + len(neg))
print(f"\nstep-interpolated AP: {ap:.4f} (prevalence {prevalence:.3f})")

all_tied = [ScoredSample(1.0, l) for l in [1, 0] * 10]
print("all-tied scores -> AUC", roc_auc(all_tied)[1], "and AP", round(pr_ap(all_tied)[1], 3))

# --- Mann-Whitney on fold-wise metric lists -------------------------------
fold_auc_a = [0.91, 0.94, 0.88, 0.93, 0.90]
fold_auc_b = [0.78, 0.82, 0.74, 0.80, 0.77]
u, p = mann_whitney_u(fold_auc_a, fold_auc_b)  # exact mode for n+m <= 16
print(f"\nfold AUCs {fold_auc_a} vs {fold_auc_b}")
print(f"U = {u} (all {len(fold_auc_a) * len(fold_auc_b)} pairs won), exact two-sided p = {p:.4f}")

u, p = mann_whitney_u(fold_auc_a, fold_auc_a)
print(f"a list against itself: U = {u}, p = {p:.3f}")

big_a = rng.uniform(0.0, 1.0, size=60)
big_b = rng.uniform(0.1, 1.1, size=60)
u, p = mann_whitney_u(big_a, big_b)  # falls back to the normal approximation
print(f"n=m=60 shifted uniforms: U = {u:.1f}, tie-corrected normal p = {p:.2e}")
