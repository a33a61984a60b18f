"""
Tighter accuracy targets need more backtracking
===============================================

The exit test asks for a gradient norm below sqrt(2 alpha) V.  With a
smaller V the single step misses more often and the tracker has to redraw a
larger batch over a shorter window.
"""

import numpy as np

from powertrack.model import default_model
from powertrack.newton_tracker import TrackerConfig
from powertrack.risk import RegParams
from powertrack.sim import ExperimentConfig, run_experiment

model = default_model(drift_rate=0.02)
for v_hat in (0.03, 0.01):
    fails = 0
    for seed in (1, 2, 3):
        traces = run_experiment(model, TrackerConfig(reg=RegParams(v_hat=v_hat)),
                                ExperimentConfig(epochs=200, seed=seed, oracle=False))
        fails += sum(not t.first_pass_ok for t in traces[1:])
    print(f"V={v_hat}: {fails} of {3 * 199} epochs failed the exit test on the first pass")
