"""Tape-based reverse-mode autodiff on a small conv net, checked against
central finite differences."""

import numpy as np

from vreid import Tape, Tensor, backward
from vreid import ops

rng = np.random.default_rng(0)

x = Tensor(rng.standard_normal((2, 3, 8, 8)))
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.1, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)


def loss_value():
    h = ops.relu(ops.conv2d(x, w, b, stride=1, padding=1))
    return ops.mean_all(ops.global_avg_pool(h))


with Tape() as tape:
    loss = loss_value()
    backward(tape, loss)

print(f"loss          {loss.item():.6f}")
print(f"w.grad norm   {np.linalg.norm(w.grad):.6f}")
print(f"b.grad        {b.grad}")

# spot-check three weight entries with central differences
h = 1e-5
for flat in (0, 17, 53):
    idx = tuple(int(i) for i in np.unravel_index(flat, w.shape))
    keep = w.data[idx]
    w.data[idx] = keep + h
    up = loss_value().item()
    w.data[idx] = keep - h
    down = loss_value().item()
    w.data[idx] = keep
    numeric = (up - down) / (2 * h)
    analytic = w.grad[idx]
    rel = abs(numeric - analytic) / max(abs(numeric), 1e-12)
    print(f"w{idx}: analytic {analytic:+.8f}  numeric {numeric:+.8f}  rel {rel:.2e}")
    assert rel < 1e-6

print("gradients agree with finite differences")
