"""
Reverse-mode automatic differentiation in a nutshell
====================================================

Build a tiny two-layer network on the Tape, compute a scalar loss, pull
gradients back through it, and confirm one of them against a central
finite difference.
"""
import numpy as np

from noisetrans import Tape, Tensor
from noisetrans.autodiff import linear, relu, reduce_sum

rng = np.random.default_rng(0)

x = Tensor(rng.standard_normal((5, 3)))
w1 = Tensor(rng.standard_normal((3, 8)) * 0.5, requires_grad=True)
b1 = Tensor(np.zeros(8), requires_grad=True)
w2 = Tensor(rng.standard_normal((8, 1)) * 0.5, requires_grad=True)
b2 = Tensor(np.zeros(1), requires_grad=True)

with Tape() as tape:
    h = relu(linear(x, w1, b1))
    y = linear(h, w2, b2)
    loss = reduce_sum(y * y)
    tape.backward(loss)

print(f"loss          = {loss.item():.6f}")
print(f"dL/dw2 (row0) = {w2.grad[:3, 0]}")

# check one entry of w1.grad by central differences
i, j = 1, 4
h_step = 1e-6


def loss_at(delta):
    wp = w1.data.copy()
    wp[i, j] += delta
    with Tape():
        hh = relu(linear(x, Tensor(wp), Tensor(b1.data)))
        yy = linear(hh, Tensor(w2.data), Tensor(b2.data))
        return reduce_sum(yy * yy).item()


fd = (loss_at(h_step) - loss_at(-h_step)) / (2 * h_step)
print(f"analytic dL/dw1[{i},{j}] = {w1.grad[i, j]:.8f}")
print(f"finite-difference       = {fd:.8f}")
assert abs(w1.grad[i, j] - fd) < 1e-6 * max(1.0, abs(fd))
print("gradient confirmed")
