"""Acceptance scenarios, one test per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; a summary with one
pass/fail line per criterion is printed at the end of the session.
"""

import time

import numpy as np
import pytest

from powertrack import dual_core as dc
from powertrack.cli import main, parse_config, default_config_path
from powertrack.model import (STREAM_PILOT, STREAM_PROXY, PlantParams, build_model,
                              default_model, sample_channel)
from powertrack.newton_tracker import TrackerConfig
from powertrack.oracle import (expected_loss_proxy, grid_recover, reference_power,
                               reference_target, solve_epoch_optimum)
from powertrack.risk import RegParams, SampleWindow, reg_risk_grad, reg_risk_hess, windowed_loss
from powertrack.sim import (ExperimentConfig, PlantState, run_experiment, simulate_epoch_plants,
                            stability_check)

SEEDS = (1, 2, 3)
EPOCHS = 200


# ---- shared runs -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tracking_runs():
    """Drifting scenario at both accuracies, same seeds; wall time per run recorded."""
    model = default_model(0.02)
    runs = {}
    for v_hat in (0.03, 0.01):
        cfg = TrackerConfig(reg=RegParams(alpha=1.0, beta=1.0, eps=1e-3, v_hat=v_hat))
        for seed in SEEDS:
            t0 = time.perf_counter()
            traces = run_experiment(model, cfg, ExperimentConfig(epochs=EPOCHS, seed=seed))
            runs[v_hat, seed] = (traces, time.perf_counter() - t0)
    return model, runs


def _interior(mu, h, model, step):
    base = dc.recover(mu, h, model)
    for j in range(mu.size):
        for s in (-step, step):
            e = np.zeros_like(mu)
            e[j] = s
            r = dc.recover(mu + e, h, model)
            if not (np.array_equal(r.power_status, base.power_status)
                    and np.array_equal(r.target_status, base.target_status)
                    and np.all(base.power_status != dc.ENDPOINT)):
                return False
    return True


# ---- criteria ----------------------------------------------------------------------------

def test_c1_derivatives_match_finite_differences(acceptance):
    model = default_model()
    reg = RegParams()
    rng = np.random.default_rng(101)
    window = SampleWindow(1, [(0, sample_channel(model.schedule, 0, 20, 101))])
    step = 1e-6
    eye = np.eye(model.m + 1) * step
    worst_g = worst_h = 0.0
    t0 = time.perf_counter()
    points = 0
    while points < 1000:
        mu = rng.uniform(0.05, 3.0, model.m + 1)
        h = rng.exponential(1.0, model.m)
        # interior: no recovery changes branch anywhere in the stencil
        if not (_interior(mu, h, model, step) and _interior(mu, window.batches[0][1], model, step)):
            continue
        g = dc.dual_loss_grad(mu, h, model)
        fd = np.array([(dc.dual_loss(mu + e, h, model) - dc.dual_loss(mu - e, h, model)) / (2 * step)
                       for e in eye])
        worst_g = max(worst_g, np.linalg.norm(fd - g) / np.linalg.norm(g))
        H = reg_risk_hess(mu, window, reg, model)
        fdh = np.column_stack([(reg_risk_grad(mu + e, window, reg, model)
                                - reg_risk_grad(mu - e, window, reg, model)) / (2 * step)
                               for e in eye])
        worst_h = max(worst_h, np.linalg.norm(fdh - H) / np.linalg.norm(H))
        points += 1
    elapsed = time.perf_counter() - t0
    ok = worst_g <= 1e-5 and worst_h <= 1e-4 and elapsed < 10
    acceptance(1, ok, f"worst grad rel err {worst_g:.2e} (tol 1e-5), worst Hessian rel err "
                      f"{worst_h:.2e} (tol 1e-4), {points} points in {elapsed:.1f}s")
    assert ok


def test_c2_recovery_matches_reference_solvers(acceptance):
    rng = np.random.default_rng(202)
    n = 10_000
    a_open = rng.uniform(1.01, 1.6, n)
    a_closed = rng.uniform(0.0, 0.95, n)
    w = rng.uniform(0.01, 2.0, n)
    plants = [PlantParams(a, c, v) for a, c, v in zip(a_open, a_closed, w)]
    model = build_model(plants, 3.0, 1.0)
    mu_agent = 10 ** rng.uniform(-3, 2, n)
    mu_budget = 10 ** rng.uniform(-3, 2, n)
    h = rng.exponential(1.0, n) * 10 ** rng.uniform(-1, 1, n)
    t0 = time.perf_counter()

    p_closed, _ = dc.power_policy(h, mu_agent, mu_budget, model.p0)
    p_bisect = dc.power_policy_bisect(h, mu_agent, mu_budget, model.p0)
    p_ref = np.array([reference_power(*args, model.p0) for args in zip(h, mu_agent, mu_budget)])
    err_p = max(np.abs(p_closed - p_ref).max(), np.abs(p_closed - p_bisect).max())

    y_closed, _ = dc.target_policy(mu_agent, model)
    y_bisect = dc.target_policy_bisect(mu_agent, model)
    y_ref = np.array([reference_target(i, mu_agent[i], model) for i in range(n)])
    err_y = max(np.abs(y_closed - y_ref).max(), np.abs(y_closed - y_bisect).max())

    # exhaustive grid: agreement to one grid cell on a subsample
    one = build_model([PlantParams(1.2, 0.3, 1.0)], 3.0, 1.0)
    grid_gap = max(abs(dc.recover_power(0, h[i], [mu_agent[i], mu_budget[i]], one)
                       - grid_recover(0, h[i], [mu_agent[i], mu_budget[i]], one))
                   for i in range(500))
    elapsed = time.perf_counter() - t0
    ok = err_p <= 1e-6 and err_y <= 1e-6 and grid_gap <= one.p0 / 10_000 + 1e-12 and elapsed < 30
    acceptance(2, ok, f"max |power err| {err_p:.2e}, max |target err| {err_y:.2e} (tol 1e-6) over "
                      f"{n} draws; grid gap {grid_gap:.1e}; {elapsed:.1f}s")
    assert ok


def test_c3_single_step_tracking(tracking_runs, acceptance):
    _, runs = tracking_runs
    details, ok = [], True
    for seed in SEEDS:
        traces, elapsed = runs[0.03, seed]
        sub = np.array([t.reg_risk_subopt for t in traces[6:]])
        within = float(np.mean(sub <= 0.03))
        no_bt = float(np.mean([t.backtracks == 0 for t in traces[1:]]))
        ok &= within >= 0.95 and no_bt >= 0.80 and elapsed < 300
        details.append(f"seed {seed}: subopt<=V {within:.1%}, no backtracks {no_bt:.1%}, "
                       f"max subopt {np.nanmax(sub):.1e}, {elapsed:.0f}s")
    acceptance(3, ok, "; ".join(details))
    assert ok


def test_c4_tighter_accuracy_fails_first_pass_more(tracking_runs, acceptance):
    _, runs = tracking_runs

    def fail_rate(v):
        flags = [not t.first_pass_ok for s in SEEDS for t in runs[v, s][0][1:]]
        return float(np.mean(flags)), int(np.sum(flags))

    r03, c03 = fail_rate(0.03)
    r01, c01 = fail_rate(0.01)
    ok = r01 > r03
    acceptance(4, ok, f"first-pass failure rate V=0.01: {r01:.2%} ({c01} epochs), "
                      f"V=0.03: {r03:.2%} ({c03} epochs), seeds {SEEDS}")
    assert ok


def test_c5_decrement_sandwich_and_quadratic_rate(tracking_runs, acceptance):
    _, runs = tracking_runs
    reports = [t.decrement_check for (traces, _) in runs.values() for t in traces
               if t.decrement_check is not None and t.decrement_check.applicable]
    n_sand = sum(r.sandwich_ok for r in reports)
    n_quad = sum(r.quadratic_ok for r in reports)
    ok = len(reports) > 0 and n_sand == len(reports) and n_quad == len(reports)
    acceptance(5, ok, f"sandwich {n_sand}/{len(reports)}, quadratic rate {n_quad}/{len(reports)} "
                      f"epochs inside the quadratic region")
    assert ok


def test_c6_stationary_consistency(acceptance):
    model = default_model(0.0)
    cfg = TrackerConfig()
    traces = run_experiment(model, cfg, ExperimentConfig(epochs=50, seed=1))
    big = SampleWindow(1, [(0, sample_channel(model.schedule, 0, 400_000, 1, stream=STREAM_PROXY))])
    mu_fixed = solve_epoch_optimum(big, cfg.reg, model, starts=1).mu
    dist = np.array([np.abs(t.mu - mu_fixed).max() for t in traces[11:]])
    dist_epoch = np.array([np.abs(t.mu - t.mu_star).max() for t in traces[11:]])
    close_ok = bool(np.all(dist <= 1e-4))

    # |Lhat - proxy| against N, averaged over independent batches
    proxy = expected_loss_proxy(mu_fixed, model.schedule, 0, model, big_n=1_000_000, seed=1).value
    sizes = (100, 1_000, 10_000)
    gaps = []
    for n in sizes:
        errs = [abs(windowed_loss(mu_fixed, SampleWindow(1, [(0, sample_channel(
            model.schedule, 0, n, 1000 + r, stream=STREAM_PILOT))]), model) - proxy)
            for r in range(200)]
        gaps.append(np.mean(errs))
    slope = float(np.polyfit(np.log(sizes), np.log(gaps), 1)[0])
    slope_ok = abs(slope + 0.5) <= 0.15
    ok = close_ok and slope_ok
    acceptance(6, ok, f"max |mu_k - mu*| after epoch 10: {dist.max():.2e} (median {np.median(dist):.2e}, "
                      f"tol 1e-4) [{'ok' if close_ok else 'FAIL'}]; distance to each epoch's own "
                      f"optimum median {np.median(dist_epoch):.1e}; slope {slope:.3f} "
                      f"(target -0.5 +/- 0.15) [{'ok' if slope_ok else 'FAIL'}]")
    assert ok


def test_c7_plant_stability(tracking_runs, acceptance):
    model, runs = tracking_runs
    traces, _ = runs[0.03, SEEDS[0]]
    rep = stability_check(traces, model)

    control = PlantState.zeros(model.m)
    flagged = np.zeros(model.m, bool)
    for k in range(EPOCHS):
        run = simulate_epoch_plants(traces[k].mu, model.schedule, k, model, 200, SEEDS[0],
                                    state=control, forced_power=0.0)
        control, flagged = run.final, flagged | run.diverged

    single = build_model([PlantParams(1.1, 0.5, 1.0)], 10.0, 5.0)
    mc = simulate_epoch_plants(np.ones(2), single.schedule, 0, single, 100_000, seed=7, forced_y=0.8)
    closed_form = 1.0 / (1.0 - (0.8 * 0.25 + 0.2 * 1.21))
    mc_err = abs(mc.second_moment[0] / closed_form - 1)

    ok = rep.omega_ok and rep.m2_ok and not rep.diverged and bool(flagged.any()) and mc_err <= 0.05
    acceptance(7, ok, f"max margin per agent {np.round(rep.max_omega, 4).tolist()} (<1); second moment "
                      f"{np.round(rep.m2_measured, 3).tolist()} <= {np.round(rep.m2_bound, 3).tolist()}; "
                      f"zero-power run diverged agents {np.flatnonzero(flagged).tolist()}; "
                      f"forced-rate variance {mc.second_moment[0]:.4f} vs {closed_form:.5f} "
                      f"({mc_err:.1%})")
    assert ok


def test_c8_constraint_violations_shrink_with_accuracy(acceptance):
    model = default_model(0.0)
    stats = {}
    bound_ok = True
    for v_hat in (0.05, 0.03, 0.01):
        cfg = TrackerConfig(reg=RegParams(v_hat=v_hat))
        traces = run_experiment(model, cfg, ExperimentConfig(epochs=40, seed=1, oracle=False,
                                                             proxy_n=200_000))
        conv = [t for t in traces[10:] if not t.unconverged]
        pv = np.array([abs(t.power_violation) for t in conv])
        yv = np.array([t.y_violation_norm for t in conv])
        se = lambda x: x.std(ddof=1) / np.sqrt(x.size)
        stats[v_hat] = (pv.mean(), se(pv), yv.mean(), se(yv), conv[0].violation_bound)
        bound_ok &= bool(np.all(pv <= [t.violation_bound for t in conv])
                         and np.all(yv <= [t.violation_bound for t in conv]))
    mono = True
    order = (0.05, 0.03, 0.01)
    for hi, lo in zip(order, order[1:]):
        for k in (0, 2):
            tol = 3 * np.hypot(stats[hi][k + 1], stats[lo][k + 1])
            mono &= stats[lo][k] <= stats[hi][k] + tol
    ok = mono and bound_ok
    desc = ", ".join(f"V={v}: |power| {s[0]:.4f}+/-{s[1]:.4f}, |y-Eq| {s[2]:.4f}+/-{s[3]:.4f}, "
                     f"bound {s[4]:.2f}" for v, s in stats.items())
    acceptance(8, ok, f"monotone {mono}, below bound {bound_ok}; {desc}")
    assert ok


def test_c9_bit_identical_traces(tmp_path, acceptance):
    cfg = parse_config(default_config_path())
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        assert main(["simulate", "--seed", "5", "--out", str(out), "--quiet"]) == 0
        outs.append(out.read_bytes())
    rows = outs[0].count(b"\n") - 1
    ok = outs[0] == outs[1] and rows == cfg.experiment.epochs
    acceptance(9, ok, f"two {rows}-epoch runs with seed 5 are byte-identical: {outs[0] == outs[1]}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
