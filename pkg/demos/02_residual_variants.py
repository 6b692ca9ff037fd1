"""
Residual combinations side by side
==================================

Apply each residual rule to the same block output and residual stream, and
check the reduction to a plain skip connection at initialisation.
"""

import numpy as np

from laurel.layers import ResidualStream, Variant, apply_residual, init_params
from laurel.tensor import Tensor

D, N, r = 6, 3, 2
rng = np.random.default_rng(1)

# a residual stream x_0, x_1, x_2 and the output of block 2's nonlinear part
stream = ResidualStream()
for _ in range(N):
    stream.append(Tensor(rng.standard_normal((4, D))))
f_out = Tensor(rng.standard_normal((4, D)))
vanilla = apply_residual(Variant.VANILLA, f_out, stream, None).data

# at init, LR and PA add exactly nothing; softmax RW halves both paths
for name in ["rw", "lr", "pa", "rw+lr", "rw+lr+pa"]:
    params = init_params(name, D, N, r, seed=0)
    out = apply_residual(name, f_out, stream, params).data
    print(f"{name:9s} equals f + x: {np.array_equal(out, vanilla)}   "
          f"equals 0.5 (f + x): {np.allclose(out, 0.5 * vanilla, rtol=0, atol=1e-15)}")

# once the parameters move, the rules differ
params = init_params("rw+lr+pa", D, N, r, seed=0)
for t in params.named_tensors().values():
    t.data[...] = rng.uniform(-0.5, 0.5, t.shape)
out = apply_residual("rw+lr+pa", f_out, stream, params).data
print("after perturbing: max |out - (f + x)| =", np.abs(out - vanilla).max())
