"""A tour of the float64 autodiff core: build a graph, differentiate it,
and verify the gradients against central finite differences.

Run from the repository root:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from geomattn import Tensor, conv2d, grad_check

rng = np.random.default_rng(0)

# Every operation records its inputs; .backward() walks the graph once in
# reverse topological order and accumulates gradients into .grad buffers.
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
loss = ((x @ w).relu() ** 2).sum()
loss.backward()
print("loss            ", float(loss.data))
print("dloss/dx norm   ", np.linalg.norm(x.grad))
print("dloss/dw norm   ", np.linalg.norm(w.grad))

# grad_check compares those buffers against (f(p+h) - f(p-h)) / 2h for every
# coordinate and reports the worst relative error.
err = grad_check(lambda: ((x @ w) ** 2).sum(), [x, w])
print(f"matmul gradcheck: max rel err {float(err):.2e} over {err.n_checked} coords")

# The same machinery covers convolution: a 2-image batch through a small
# 3x3 kernel, checked coordinate by coordinate.
imgs = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
kernel = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.2, requires_grad=True)
mix = Tensor(rng.normal(size=(2, 4, 4, 4)))  # fixed weights make the sum generic
err = grad_check(lambda: (conv2d(imgs, kernel, stride=2, pad=1) * mix).sum(), [imgs, kernel])
print(f"conv2d gradcheck: max rel err {float(err):.2e} over {err.n_checked} coords")

# Piecewise operations (relu, max, hard mining) have kinks where a finite
# difference straddles two linear pieces and measures nonsense. With
# skip_kinks=True the checker detects those coordinates by comparing branch
# patterns at +h/-h and skips them; the counts keep the check honest.
y = Tensor(np.linspace(-1e-6, 1e-6, 9), requires_grad=True)  # all near the kink
err = grad_check(lambda: y.relu().sum(), [y], skip_kinks=True)
print(
    f"relu-at-kink gradcheck: max rel err {float(err):.2e} "
    f"(checked {err.n_checked}, skipped {err.n_skipped} kink-straddling coords)"
)
