"""
Time-optimal planners on closed-form cases
==========================================

Both planners are shooting methods. On problems with a known answer they
reproduce it: a rest-to-rest approach takes 2*sqrt(d/a), a pure translation
stops in v/a and a single-axis spin in w/(B gamma).
"""

# %%
# Approach: rest to rest
# ----------------------
import numpy as np

from tumblecap import postcapture as post
from tumblecap import precapture as pre
from tumblecap import target

for d in (0.1, 0.25, 0.5, 1.0):
    pred = pre.GraspPrediction(target.TargetState(r=np.array([d, 0.0, 0.0])), np.zeros(2), np.zeros(3))
    plan = pre.solve(pre.ChaserState(), pred, pre.PlannerConfig(a_max=0.01))
    print(f"d = {d:4.2f} m  t1 = {plan.duration:8.4f} s  closed form {2 * np.sqrt(d / 0.01):8.4f} s")

# %%
# Detumbling
# ----------
lim = post.DetumbleLimits()
sigma = np.array([-0.5, 0.6])
cases = {
    "translation": post.CoupledState(np.array([0.07, 0.0, 0.0]), np.zeros(3)),
    "spin": post.CoupledState(np.zeros(3), np.array([0.09, 0.0, 0.0])),
    "general": post.CoupledState(np.array([0.02, 0.01, -0.015]), np.array([0.04, -0.03, 0.05])),
}
for name, s1 in cases.items():
    offset = np.zeros(3) if name != "general" else np.array([-0.25, -0.1, 0.05])
    plan = post.solve(s1, post.DetumbleParams(lim, sigma, offset))
    print(f"{name:11s} t2 - t1 = {plan.duration:7.3f} s  residual {plan.residual:.1e}  "
          f"max |H2| {np.max(np.abs(plan.samples['H2'])):.1e}")
