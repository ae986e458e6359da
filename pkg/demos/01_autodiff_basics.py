#!/usr/bin/env python3
"""A tour of the tensor core: build a graph, run backward, check a gradient.

Usage: python demos/01_autodiff_basics.py
"""

import numpy as np

from prunekit import tensor as T
from prunekit.tensor import ComputeGraph, Tensor

print("=== tensors and the tape ===\n")

w = Tensor(np.array([[0.5, -1.0], [2.0, 0.1]], dtype=np.float32))
x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))

with ComputeGraph() as g:
    h = T.gelu(T.matmul(x, w))
    y = T.sum_all(T.mul(h, h))

print(f"forward value   : {y.item():.6f}")
print(f"recorded nodes  : {len(g)} primitives")

g.backward(y)
print(f"dY/dw:\n{w.grad}\n")

print("=== gradient vs central finite differences ===\n")
eps = 1e-3
worst = 0.0
for i in range(2):
    for j in range(2):
        orig = w.data[i, j]

        def value():
            h = np.asarray(x.data, dtype=np.float64) @ np.asarray(w.data, np.float64)
            c = 0.7978845608028654
            h = 0.5 * h * (1 + np.tanh(c * (h + 0.044715 * h**3)))
            return float((h * h).sum())

        w.data[i, j] = orig + eps
        up = value()
        w.data[i, j] = orig - eps
        down = value()
        w.data[i, j] = orig
        fd = (up - down) / (2 * eps)
        err = abs(fd - w.grad[i, j]) / max(abs(fd), 1e-5)
        worst = max(worst, err)
        print(f"w[{i},{j}]: analytic {w.grad[i,j]:+.6f}  finite-diff {fd:+.6f}  rel err {err:.2e}")

print(f"\nworst relative error: {worst:.2e} (tolerance 1e-3)")
assert worst < 1e-3

print("\n=== grads accumulate until zeroed ===\n")
theta = Tensor([1.0, 2.0, 3.0])
with ComputeGraph() as g:
    loss = T.sum_all(T.mul(theta, theta))
g.backward(loss)
print("after one backward :", theta.grad)
g.backward(loss)
print("after two backwards:", theta.grad)
theta.zero_grad()
print("after zero_grad    :", theta.grad)
