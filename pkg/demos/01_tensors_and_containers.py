"""Tensors, seeded randomness, and the MSRT on-disk container.

Everything in this package is a float32 numpy array; reductions
accumulate in float64. Random numbers come from a counter-based Philox
stream, so a seed plus a split path pins the exact values on every
platform.
"""

import io

import numpy as np

from msrae.tensor import Rng, elementwise, gaussian, read_tensor, reduce, write_tensor

# --- elementwise ops validate shapes and never broadcast beyond scalars ---
a = np.array([1.0, 2.0, 3.0], dtype=np.float32)
b = np.array([10.0, 20.0, 30.0], dtype=np.float32)
print("add:", elementwise("add", a, b))
print("scale by 0.5:", elementwise("scale", a, 0.5))
print("abs:", elementwise("abs", a - 2.0))

# --- reductions accumulate in float64 ---
big = gaussian(Rng(0), (1_000_000,), mean=0.0, stddev=0.1)
print(f"mean of 1e6 draws N(0, 0.1^2): {reduce('mean', big):+.5f}")
print("voxels above 0.25:", reduce("count_greater", big, threshold=0.25))

# --- identical seeds give identical streams; splits are independent ---
print("same seed, same bytes:",
      Rng(7).normal((3,)).tobytes() == Rng(7).normal((3,)).tobytes())
print("split(0) vs split(1) differ:",
      Rng(7).split(0).normal((3,)).tobytes() != Rng(7).split(1).normal((3,)).tobytes())

# --- the MSRT container round-trips bit-exactly ---
tensor = gaussian(Rng(42), (2, 3, 4))
buf = io.BytesIO()
write_tensor(buf, tensor)
buf.seek(0)
back = read_tensor(buf)
print("MSRT round-trip bit-exact:", back.tobytes() == tensor.tobytes())
print("record layout: magic MSRT | version | dtype code | rank | extents | payload")
print(f"first 16 bytes: {buf.getvalue()[:16].hex(' ')}")
