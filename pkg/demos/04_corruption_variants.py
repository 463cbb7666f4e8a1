"""The four training-input corruption settings.

SAE trains on clean inputs; SDAE adds Gaussian noise; the -MSR variants
blend each sample with a randomly drawn partner from the pool
(x~ = (1-a) x + a x_r, partner never the sample itself); SDAE-MSR does
both. Corruption happens on the fly during training and never at
inference.
"""

import numpy as np

from msrae import corrupt
from msrae.tensor import Rng

rng = Rng(5)
pool = np.stack([np.full((1, 2, 4, 4), float(v), dtype=np.float32)
                 for v in (0.0, 1.0, 2.0, 3.0)])

print(f"{'variant':>10}  {'alpha':>5}  {'sigma':>6}  {'tag':>9}")
for name in corrupt.VARIANTS:
    spec = corrupt.spec_for_variant(name)
    print(f"{name:>10}  {spec.alpha:>5}  {spec.sigma:>6}  {spec.variant:>9}")

print("\ncorrupting the all-zeros sample (pool index 0):")
for name in corrupt.VARIANTS:
    spec = corrupt.spec_for_variant(name)
    out, partner = corrupt.corrupt(spec, pool[0], pool, rng, self_index=0)
    print(f"{name:>10}: mean {out.mean():+.4f}  std {out.std():.4f}  "
          f"partner={'-' if partner is None else partner}")

print("\npartner draws are uniform over the pool minus self:")
counts = np.zeros(len(pool), dtype=int)
spec = corrupt.spec_for_variant("SAE-MSR")
for _ in range(12000):
    _, partner = corrupt.corrupt(spec, pool[2], pool, rng, self_index=2)
    counts[partner] += 1
print("draw frequencies by pool index:", np.round(counts / counts.sum(), 3))

print("\nwith sigma=0 the blend is an exact convex combination:")
out, partner = corrupt.corrupt(corrupt.CorruptionSpec(0.25, 0.0), pool[1], pool, rng, 1)
print(f"0.75 * 1.0 + 0.25 * pool[{partner}] -> constant {out.ravel()[0]:.4f}")
