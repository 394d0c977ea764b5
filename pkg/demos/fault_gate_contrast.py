"""
Why the fit-error gate matters
==============================

The same seed is flown twice: once with the fault gate and once with every
scan accepted. Without the gate, scans corrupted by the approaching hand pull
the estimate away just before capture and the grasp misses.
"""

# %%
import sys

from tumblecap import config
from tumblecap import supervisor as sv

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 5

for text in ("", "estimator.gate = false"):
    res = sv.run_mission(config.parse(text), seed)
    label = "gated  " if not text else "ungated"
    print(label, sv.summary_line(res.events))

# %%
# The ungated run is expected to end with ``capture missed``: its closest
# approach may be within a few centimetres, but the relative velocity is not.
