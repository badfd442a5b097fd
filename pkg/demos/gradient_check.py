"""Compare a convolution's analytic gradient with central differences.

The tape records the forward pass; backward() fills .grad on every input that
asked for it. Nudging each weight by +-h and re-running the forward pass gives
the numerical slope, which should agree to many digits in float64.
"""

import numpy as np

from mccl import ops
from mccl.tensor import Tape, Tensor, backward, suspend

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 3, 9, 9)), dtype=np.float64)
w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True, dtype=np.float64)
r = rng.normal(size=(2, 4, 5, 5))  # (9 + 2 - 3) / 2 + 1 = 5


def objective():
    # a fixed random weighting makes every output element matter
    return ops.sum(ops.mul(ops.conv2d(x, w, stride=2, pad=1), Tensor(r, dtype=np.float64)))


with Tape() as tape:
    loss = objective()
backward(loss, tape)

h = 1e-6
print("index         analytic     numerical    rel err")
for idx in [(0, 0, 0, 0), (1, 2, 1, 1), (3, 1, 2, 0), (2, 0, 1, 2)]:
    old = w.data[idx]
    with suspend():
        w.data[idx] = old + h
        up = objective().item()
        w.data[idx] = old - h
        down = objective().item()
    w.data[idx] = old
    num = (up - down) / (2 * h)
    ana = w.grad[idx]
    print(f"{str(idx):12s} {ana:11.6f} {num:13.6f}  {abs(ana - num) / max(abs(num), 1e-12):.1e}")

print("\nThe full suite (every op, every loss, and a micro model) runs with `mccl gradcheck`.")
