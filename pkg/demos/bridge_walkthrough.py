"""
Walking along the bridge
========================

A scalar tour of the diffusion bridge: the schedule, the forward marginal,
one reverse step, and a full five-step reconstruction driven by a predictor
that knows the answer.
"""

import numpy as np

from rbdm.bridge import (estimate_x0, forward_sample, make_schedule, posterior_coefficients,
                         posterior_step, sample, sampling_steps)

T = 100
sched = make_schedule(T)

# The mixing weight grows linearly, the variance is a parabola that
# vanishes at both ends and peaks at one half in the middle.
for t in (0, 10, 25, 50, 75, 90, 100):
    print(f"t={t:3d}  m={sched.m[t]:.2f}  delta={sched.delta[t]:.3f}")

###############################################################################
# Forward marginal
# ----------------
# Pin the bridge at x0 = 0.8 (the stain) and ybar0 = -0.5 (the encoded
# polarization). Sampled states at t=30 scatter around the linear mix.

rng = np.random.default_rng(0)
x0 = np.full(50_000, 0.8)
yb = np.full(50_000, -0.5)
fs = forward_sample(x0, yb, 30, sched, rng)
print("mean", fs.x_t.mean().round(3), "expected", round(0.7 * 0.8 + 0.3 * -0.5, 3))
print("var ", fs.x_t.var().round(3), "expected", round(sched.delta[30], 3))

# The training target is the residual x_t - x0, so subtracting it gives x0 back.
print("recovered x0:", np.unique(estimate_x0(fs.x_t, fs.target).round(6)))

###############################################################################
# One reverse step
# ----------------
# Given x_t and a guess of x0, the next state is Gaussian. Its spread
# shrinks as s approaches 0 and vanishes there.

for t, s in ((100, 80), (60, 40), (20, 0)):
    ratio, var = posterior_coefficients(t, s, sched)
    print(f"{t:3d} -> {s:3d}: pull toward x_t {ratio:.3f}, variance {var:.4f}")

x_s = posterior_step(fs.x_t, x0, yb, 30, 10, sched, rng)
print("after 30 -> 10 the marginal matches t=10:",
      x_s.mean().round(3), round(0.9 * 0.8 + 0.1 * -0.5, 3), x_s.var().round(3),
      round(sched.delta[10], 3))

###############################################################################
# Five-step sampling
# ------------------
# With a predictor that returns the exact residual every estimate of x0 is
# exact, so the chain lands on the target whatever noise it picks up.


class Oracle:
    T = 100

    def __init__(self, x0, ybar0):
        self.x0, self.ybar0 = x0, ybar0

    def encode(self, y0):
        return self.ybar0

    def predict_eps(self, x_t, ybar0, t):
        return x_t - self.x0


img = np.tanh(rng.standard_normal((3, 16, 16)))
start = np.tanh(rng.standard_normal((3, 16, 16)))
res = sample(Oracle(img, start), None, 5, sched, rng, record_trajectory=True)
print("steps visited", sampling_steps(T, 5))
for t, frame in zip(sampling_steps(T, 5), res.trajectory):
    print(f"t={t:3d}  distance to target {np.sqrt(np.mean((frame - img) ** 2)):.3f}")
