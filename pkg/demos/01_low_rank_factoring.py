"""
Factoring a weight matrix as A @ B
==================================

Take a weight with a decaying spectrum, split it into two thin factors and
check how much is lost when small singular values are dropped.
"""

import numpy as np

from ablab import linalg, nn

rng = np.random.default_rng(0)

# A 96 x 48 weight whose singular values fall off geometrically
u = linalg.orthogonal_init(96, 48, seed=1)
v = linalg.orthogonal_init(48, 48, seed=2)
spectrum = 0.8 ** np.arange(48)
w = (u * spectrum) @ v + 1e-3 * rng.standard_normal((96, 48))

res = linalg.svd(w)
print("largest singular values:", np.round(res.s[:6], 4))
print("orthonormal U:", np.allclose(res.u.T @ res.u, np.eye(48)))

# Keep every singular value above 10 % of the largest one
for cutoff in (0.0, 0.05, 0.1, 0.3):
    p = nn.ab_decompose(nn.Parameter.full("w", w), cutoff)
    err = np.linalg.norm(w - nn.reconstruct(p).w) ** 2
    discarded = np.sum(res.s[p.rank:] ** 2)
    ratio = p.full_numel() / p.numel()
    print(f"cutoff {cutoff:4.2f}: k={p.rank:2d}  A{p.a.shape} B{p.b.shape}  "
          f"compression {ratio:5.2f}:1  error {err:.3e} (discarded energy {discarded:.3e})")

# Wide weights are transposed first so the factored view is always tall
p = nn.ab_decompose(nn.Parameter.full("wide", w.T.copy()), 0.1)
print("wide weight transposed before factoring:", p.transposed, "A", p.a.shape, "B", p.b.shape)

# Convolution kernels are flattened to (out, in * kh * kw)
kernel = rng.standard_normal((16, 3, 3, 3))
m2d, transposed = nn.flatten_to_2d(kernel)
print("conv kernel", kernel.shape, "->", m2d.shape, "transposed:", transposed)
