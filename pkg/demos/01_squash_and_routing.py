#!/usr/bin/env python3
"""Walk through the capsule primitives on paper-sized toy tensors.

Shows the squash nonlinearity compressing vector norms into [0, 1), the
per-pair linear predictions, and how dynamic routing concentrates coupling
coefficients on the output capsules the predictions agree about.
"""

import numpy as np

from capsintent import dynamic_routing, predict_capsules, squash
from capsintent.capsnet import RoutingTrace, dynamic_routing as routing

rng = np.random.default_rng(0)

print("=== squash ===")
for scale in (0.1, 1.0, 3.0, 10.0):
    s = np.array([scale, 0.0])
    v = squash(s)
    print(f"|s| = {scale:5.1f}  ->  |squash(s)| = {np.linalg.norm(v):.4f}")

print("\n=== predictions (votes) ===")
P, K, d_p, n = 6, 3, 4, 2
u = squash(rng.normal(size=(P, d_p)), axis=1)
transforms = rng.normal(0.0, 1.0, size=(P, K, d_p, n))
votes = predict_capsules(u, transforms)
print(f"{P} primary capsules x {K} output capsules -> votes {votes.shape}")

print("\n=== routing by agreement ===")
# make every primary capsule agree about output 1 and disagree elsewhere
agreed = rng.normal(size=n)
votes[:, 1, :] = agreed + rng.normal(0.0, 0.05, size=(P, n))
caps, state, trace = routing(votes, iters=3, want_trace=True)
for it, c in enumerate(trace.coefficients):
    print(f"iteration {it}: mean coupling per output = {c.mean(axis=0).round(3)}")
print(f"output norms: {caps.norms.round(3)}  (capsule 1 wins the agreement)")
print(f"coefficient rows sum to 1: {np.allclose(state.coefficients.sum(axis=1), 1.0)}")
