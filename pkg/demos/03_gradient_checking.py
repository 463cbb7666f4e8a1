"""Analytic gradients against central finite differences.

All backward passes are hand-derived. Running the same forward code on
float64 inputs gives a 64-bit shadow mode in which finite differences
are trustworthy; the analytic gradients must then agree to ~1e-6
relative, far below the 1e-4 gate used in the tests.
"""

import numpy as np

from msrae import model
from msrae.tensor import Rng

rng = Rng(3)
cfg = model.ModelConfig(enc_channels=(2, 3), dec_channels=(2, 2))
params = model.init_params(cfg, rng).astype(np.float64)  # shadow mode
loss_cfg = model.LossConfig(lam=1e-3, gamma=5e-4)

x_clean = rng.normal((1, 1, 4, 8, 8), 0.5, 0.2).astype(np.float64)
x_corrupt = x_clean + rng.normal(x_clean.shape, 0.0, 0.02).astype(np.float64)

total, comps, grads = model.loss_backward(params, x_clean, x_corrupt, loss_cfg)
print(f"loss {total:.6f} = recon {comps.recon:.6f} + weight {comps.weight_penalty:.6f} "
      f"+ sparsity {comps.sparsity:.6f}")

eps = 1e-5
print(f"\ncentral finite differences at eps={eps:g}:")
print(f"{'parameter':>22}  {'n':>5}  {'max rel err':>12}")
for name, arr in params.param_items():
    fd = np.zeros_like(arr)
    flat, fdf = arr.reshape(-1), fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = model.loss(params, x_clean, x_corrupt, loss_cfg)[0]
        flat[i] = orig - eps
        lo = model.loss(params, x_clean, x_corrupt, loss_cfg)[0]
        flat[i] = orig
        fdf[i] = (hi - lo) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(grads[name])), 1e-8)
    err = float(np.max(np.abs(fd - grads[name]) / denom))
    print(f"{name:>22}  {arr.size:>5}  {err:>12.2e}")
