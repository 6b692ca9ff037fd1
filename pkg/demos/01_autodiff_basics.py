"""
Reverse-mode gradients on a tiny graph
=======================================

Build a small computation, run backward, and compare against central
finite differences.
"""

import numpy as np

from laurel.tensor import Tape, Tensor, add, backward, cross_entropy, finite_diff_grad, matmul, relu

rng = np.random.default_rng(0)

# leaves that require gradients are what backward() reports on
W = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
x = Tensor(rng.standard_normal((5, 3)))
y = [0, 1, 2, 3, 0]

# the Tape records every node created inside the block, in creation order
with Tape() as tape:
    loss = cross_entropy(relu(add(matmul(x, W), b)), y)
print("recorded ops:", [n.op for n in tape.nodes])
print("loss:", loss.item())

grads = backward(loss)
print("dL/dW:\n", grads[W])

# the same gradient by central differences, one coordinate at a time
def f(flat):
    W_ = Tensor(flat.reshape(3, 4))
    return cross_entropy(relu(add(matmul(x, W_), b)), y).item()

numeric = finite_diff_grad(f, W.data.ravel().copy(), h=1e-5).reshape(3, 4)
print("max |analytic - numeric|:", np.abs(grads[W] - numeric).max())
