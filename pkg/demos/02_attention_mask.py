"""The attention computing pipeline, step by step.

A local feature map L is turned into a spatial mask Q in three moves:
  1. neighborhood softmax  M(t,u,v) = exp L / sum over the KxK window
  2. channel NMS           G = L / per-location channel max
  3. mask                  Q = normalize(max over channels of M * G)

Run from the repository root:  python3 demos/02_attention_mask.py
"""

import numpy as np

from geomattn import AcmConfig, Tensor, attention_mask

np.set_printoptions(precision=4, suppress=True)

# -- a constant map has a fully analytic answer -----------------------------
# On a 3x3 grid with K=3 and truncated borders, every exp(L) is equal, so M
# is one over the neighborhood size: 1/4 at corners, 1/6 at edges, 1/9 at
# the center. After normalization Q = {9/64, 3/32, 1/16}. (The map must be
# strictly positive: the channel-NMS ratio L / max L needs a sign.)
L = Tensor(np.ones((1, 3, 3)))
out = attention_mask(L, AcmConfig(K=3), keep_intermediates=True)
print("constant 3x3 input, K=3")
print(out.Q.data)
print("corner exact:", 9 / 64, " edge:", 3 / 32, " center:", 1 / 16)
print("sum(Q) =", float(out.Q.data.sum()))
print()

# -- a single hot keypoint dominates its neighborhood -----------------------
rng = np.random.default_rng(7)
L = Tensor(rng.uniform(0.05, 0.2, size=(4, 8, 8)))
L.data[1, 3, 4] = 4.0  # channel 1 fires hard at (3, 4)
out = attention_mask(L, AcmConfig(K=3), keep_intermediates=True)
q = out.Q.data
peak = tuple(int(v) for v in np.unravel_index(np.argmax(q), q.shape))
print("hot keypoint at (3,4) -> Q peak at", peak, "with mass", float(q.max()))
print("Q sums to", float(q.sum()), "and is nonnegative:", bool((q >= 0).all()))

# The channel-NMS map G is exactly 1 wherever some channel attains the
# per-location max; everywhere else it is the ratio to that max.
g_max = out.G.data.max(axis=0)
print("max over channels of G equals 1 everywhere:", bool(np.all(g_max == 1.0)))
print()

# -- the mask is what the attentional branch multiplies in ------------------
# Downstream, Q (shape h x w, one cell per 8x8 input patch) reweights every
# channel of the shallow feature map, so spatial cells with attention mass
# dominate the pooled descriptor.
print("Q as a heat grid:")
for row in q:
    print("  " + " ".join(f"{v:.3f}" for v in row))
