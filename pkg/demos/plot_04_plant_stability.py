"""
Closed-loop stability under the learned policy
==============================================

A plant's state variance stays bounded when its stability margin
a_open^2 - E[q] (a_open^2 - a_closed^2) is below one.  We check the margin
along a drifting run and contrast it with a run that never transmits.
"""

import numpy as np

from powertrack.model import PlantParams, build_model, default_model
from powertrack.newton_tracker import TrackerConfig
from powertrack.sim import ExperimentConfig, PlantState, run_experiment, simulate_epoch_plants, stability_check

model = default_model()
traces = run_experiment(model, TrackerConfig(), ExperimentConfig(epochs=100, seed=2, oracle=False))
report = stability_check(traces, model)
print("largest margin per agent:", np.round(report.max_omega, 3))
print("second moment per agent: ", np.round(report.m2_measured, 3), "bound", np.round(report.m2_bound, 3))

# Without transmissions every plant runs open loop and the unstable ones blow up.
state = PlantState.zeros(model.m)
for k in range(30):
    run = simulate_epoch_plants(np.ones(5), model.schedule, k, model, 200, seed=2, state=state,
                                forced_power=0.0)
    state = run.final
print("zero power, diverged agents:", np.flatnonzero(run.diverged))

# A fixed success rate of 0.8 on a single plant matches the geometric-series variance.
single = build_model([PlantParams(1.1, 0.5, 1.0)], 10.0, 5.0)
run = simulate_epoch_plants(np.ones(2), single.schedule, 0, single, 100_000, seed=7, forced_y=0.8)
print(f"simulated variance {run.second_moment[0]:.4f}, closed form {1 / (1 - 0.442):.4f}")
