"""
Recovering power and target from multipliers
============================================

Given the multipliers, each agent's transmit power and target success rate
come from one-dimensional maximizations with closed forms.  This script
compares the closed forms with brute-force references.
"""

import numpy as np

from powertrack import dual_core
from powertrack.model import default_model
from powertrack.oracle import grid_recover, reference_power, reference_target

model = default_model()
mu = np.array([0.9, 0.8, 0.9, 1.2, 0.12])

# Power grows logarithmically with channel gain until it hits the per-agent cap.
for h in (0.05, 0.2, 1.0, 5.0):
    p = dual_core.recover_power(0, h, mu, model)
    print(f"h={h:5.2f}  closed form p={p:.6f}  root finding p={reference_power(h, mu[0], mu[4], model.p0):.6f}"
          f"  grid p={grid_recover(0, h, mu, model):.4f}")

# The target rate decreases as its multiplier grows, never below the stability threshold.
for mu_i in (0.01, 0.1, 1.0, 10.0):
    y = dual_core.recover_target(3, np.r_[1.0, 1.0, 1.0, mu_i, 1.0], model)
    print(f"mu={mu_i:5.2f}  y={y:.6f}  reference y={reference_target(3, mu_i, model):.6f}"
          f"  threshold={model.y_min[3]:.6f}")
