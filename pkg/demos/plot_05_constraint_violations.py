"""
Constraint violations shrink with the accuracy target
=====================================================

The regularizers bias the multipliers, which shows up as slack or violation
in the success-rate and power constraints.  On a stationary channel the bias
falls with V.
"""

import numpy as np

from powertrack.model import default_model
from powertrack.newton_tracker import TrackerConfig
from powertrack.risk import RegParams
from powertrack.sim import ExperimentConfig, run_experiment

model = default_model(drift_rate=0.0)
for v_hat in (0.05, 0.03, 0.01):
    traces = run_experiment(model, TrackerConfig(reg=RegParams(v_hat=v_hat)),
                            ExperimentConfig(epochs=30, seed=1, oracle=False, proxy_n=100_000))
    tail = traces[10:]
    print(f"V={v_hat}: power {np.mean([t.power_violation for t in tail]):+.4f}  "
          f"success gap {np.mean([t.y_violation_norm for t in tail]):.4f}  "
          f"bound {tail[0].violation_bound:.2f}")
