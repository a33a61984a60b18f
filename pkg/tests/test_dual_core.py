import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import single_plant_model
from powertrack import dual_core as dc
from powertrack.model import default_model
from powertrack.oracle import grid_recover, reference_power, reference_target

pos = st.floats(1e-3, 20.0)


def test_power_zero_when_slope_nonpositive():
    p, s = dc.power_policy(1.0, 1.0, 1.0, 10.0)
    assert p == 0.0 and s == dc.LOWER


def test_power_log_two():
    p, s = dc.power_policy(1.0, 2.0, 1.0, 10.0)
    assert p == pytest.approx(0.693147, abs=5e-7)
    # independent oracles: root finding and a fine grid
    assert p == pytest.approx(reference_power(1.0, 2.0, 1.0, 10.0), abs=1e-10)
    grid = np.arange(0.0, 2.0, 1e-6)
    assert abs(p - grid[np.argmax(2.0 * -np.expm1(-grid) - grid)]) <= 1e-6
    assert s == dc.INTERIOR


def test_power_cap_binds():
    p, s = dc.power_policy(1.0, 2.0, 1.0, 0.5)
    assert p == 0.5 and s == dc.UPPER


def test_power_zero_channel():
    p, _ = dc.power_policy(0.0, 2.0, 1.0, 3.0)
    assert p == 0.0


def test_power_endpoint_region():
    # no budget price: the objective is increasing, spend the cap
    p, s = dc.power_policy(1.0, 2.0, 0.0, 3.0)
    assert p == 3.0 and s == dc.ENDPOINT
    # negative success price: never transmit
    p, _ = dc.power_policy(1.0, -1.0, 1.0, 3.0)
    assert p == 0.0


@given(st.floats(1e-3, 10.0), pos, pos, st.floats(0.1, 10.0))
def test_power_matches_reference(h, a, b, p0):
    p, _ = dc.power_policy(h, a, b, p0)
    assert abs(float(p) - reference_power(h, a, b, p0)) <= 1e-9 * max(1.0, p0)
    assert abs(float(p) - float(dc.power_policy_bisect(h, a, b, p0))) <= 1e-9 * max(1.0, p0)


@given(st.floats(1e-3, 10.0), pos, pos)
def test_power_beats_grid(h, a, b):
    model = single_plant_model(p_max=3.0, budget=2.0)
    mu = np.array([a, b])
    p = dc.recover_power(0, h, mu, model)
    g = grid_recover(0, h, mu, model, resolution=3000)
    obj = lambda x: a * -math.expm1(-h * x) - b * x
    assert obj(p) >= obj(g) - 1e-12
    assert abs(p - g) <= 3.0 / 3000 + 1e-12 or abs(obj(p) - obj(g)) < 1e-9


def test_target_upper_clip_touched():
    model = single_plant_model(1.1, 0.0, 1.0)
    y = dc.recover_target(0, np.array([1.21, 1.0]), model)
    assert y == pytest.approx(1.0, abs=1e-12)
    assert reference_target(0, 1.21, model) == pytest.approx(1.0, abs=1e-12)


def test_target_interior_value():
    model = single_plant_model(1.1, 0.0, 1.0)
    y = dc.recover_target(0, np.array([4.84, 1.0]), model)
    assert y == pytest.approx(0.586777, abs=5e-7)
    assert y == pytest.approx(reference_target(0, 4.84, model), abs=1e-10)


def test_target_small_multiplier_goes_to_one():
    model = single_plant_model(1.1, 0.0, 1.0)
    assert dc.recover_target(0, np.array([1e-12, 1.0]), model) == 1.0
    assert dc.recover_target(0, np.array([0.0, 1.0]), model) == 1.0


@given(st.floats(1.01, 1.6), st.floats(0.0, 0.95), st.floats(0.01, 3.0), st.floats(1e-4, 1e3))
def test_target_matches_bisection(a_open, a_closed, w, mu):
    model = single_plant_model(a_open, a_closed, w)
    y = dc.recover_target(0, np.array([mu, 1.0]), model)
    yb = float(dc.target_policy_bisect(np.array([mu]), model)[0])
    assert abs(y - yb) <= 1e-9
    assert model.y_min[0] < y <= 1.0


def test_loss_with_clipped_recoveries():
    model = single_plant_model(1.1, 0.0, 1.0, p_max=2.0, budget=1.5)
    mu = np.array([0.5, 1.0])   # mu h <= mu_b gives p = 0; mu <= W D gives y = 1
    f = dc.dual_loss(mu, np.array([1.0]), model)
    assert f == pytest.approx(-1.0 + 0.5 * (0 - 1) + 1.0 * 1.5, abs=1e-14)
    g = dc.dual_loss_grad(mu, np.array([1.0]), model)
    assert np.allclose(g, [-1.0, 1.5])
    assert np.all(dc.dual_loss_hess(mu, np.array([1.0]), model) == 0)


def test_budget_gradient_is_slack(model, rng):
    h = rng.exponential(1.0, (50, model.m))
    mu = rng.uniform(0.1, 3.0, model.m + 1)
    rec = dc.recover(mu, h, model)
    g = dc.dual_loss_grad(mu, h, model)
    assert np.allclose(g[:, -1], model.budget - rec.powers.sum(axis=1), atol=0)


@given(st.lists(st.floats(0.05, 5.0), min_size=5, max_size=5),
       st.lists(st.floats(0.05, 5.0), min_size=5, max_size=5),
       st.lists(st.floats(0.01, 5.0), min_size=4, max_size=4))
def test_loss_convex_on_segments(a, b, h):
    model = default_model()
    a, b, h = np.array(a), np.array(b), np.array(h)
    mid = dc.dual_loss(0.5 * (a + b), h, model)
    assert mid <= 0.5 * dc.dual_loss(a, h, model) + 0.5 * dc.dual_loss(b, h, model) + 1e-9


@given(st.lists(st.floats(0.05, 5.0), min_size=5, max_size=5),
       st.lists(st.floats(0.01, 5.0), min_size=4, max_size=4),
       st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4))
def test_loss_dominates_any_feasible_power(mu, h, frac):
    model = default_model()
    mu, h = np.array(mu), np.array(h)
    rec = dc.recover(mu, h, model)
    p_alt = np.array(frac) * model.p0
    alt = (dc.perf_values(rec.targets, model).sum()
           + mu[:4] @ (model.success.q(h, p_alt) - rec.targets)
           + mu[4] * (model.budget - p_alt.sum()))
    assert dc.dual_loss(mu, h, model) >= alt - 1e-12


@given(st.lists(st.floats(0.05, 5.0), min_size=5, max_size=5),
       st.lists(st.floats(0.01, 5.0), min_size=4, max_size=4))
def test_hessian_psd(mu, h):
    H = dc.dual_loss_hess(np.array(mu), np.array(h), default_model())
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H)[0] >= -1e-10


def test_hessian_psd_random_points(model, rng):
    for _ in range(100):
        mu = rng.uniform(0.01, 5.0, model.m + 1)
        h = rng.exponential(1.0, model.m)
        assert np.linalg.eigvalsh(dc.dual_loss_hess(mu, h, model))[0] >= -1e-10


def _stable_statuses(mu, h, model, step):
    base = dc.recover(mu, h, model)
    for j in range(mu.size):
        for s in (-step, step):
            e = np.zeros_like(mu)
            e[j] = s
            r = dc.recover(mu + e, h, model)
            if not (np.array_equal(r.power_status, base.power_status)
                    and np.array_equal(r.target_status, base.target_status)):
                return False
    return True


def test_gradient_and_hessian_match_finite_differences(model, rng):
    step, checked = 1e-6, 0
    while checked < 200:
        mu = rng.uniform(0.05, 3.0, model.m + 1)
        h = rng.exponential(1.0, model.m)
        if not _stable_statuses(mu, h, model, step):
            continue
        eye = np.eye(model.m + 1) * step
        fd_g = np.array([(dc.dual_loss(mu + e, h, model) - dc.dual_loss(mu - e, h, model)) / (2 * step)
                         for e in eye])
        g = dc.dual_loss_grad(mu, h, model)
        assert np.linalg.norm(fd_g - g) <= 1e-5 * np.linalg.norm(g)
        fd_h = np.array([(dc.dual_loss_grad(mu + e, h, model) - dc.dual_loss_grad(mu - e, h, model))
                         / (2 * step) for e in eye])
        H = dc.dual_loss_hess(mu, h, model)
        assert np.linalg.norm(fd_h - H) <= 1e-4 * max(np.linalg.norm(H), 1e-8) + 1e-8
        checked += 1


def test_batch_shapes(model, rng):
    mu = rng.uniform(0.1, 2.0, model.m + 1)
    h = rng.exponential(1.0, (7, model.m))
    assert dc.dual_loss(mu, h, model).shape == (7,)
    assert dc.dual_loss_grad(mu, h, model).shape == (7, model.m + 1)
    assert dc.dual_loss_hess(mu, h, model).shape == (7, model.m + 1, model.m + 1)
    single = dc.dual_loss(mu, h[3], model)
    assert isinstance(single, float) and single == pytest.approx(dc.dual_loss(mu, h, model)[3], rel=1e-14)


def test_kink_count():
    model = single_plant_model(1.1, 0.0, 1.0, p_max=10.0)
    # mu h / mu_b = 1 puts the free power exactly at zero
    assert dc.kink_count(np.array([2.0, 2.0]), np.array([[1.0]]), model) == 1
    assert dc.kink_count(np.array([2.0, 1.0]), np.array([[1.0]]), model) == 0
    # mu = W D touches the target cap exactly
    assert dc.kink_count(np.array([1.21, 1.0]), np.array([[1.0]]), model) >= 1


def test_self_concordance_ratio_reports_values(model, rng):
    mu = rng.uniform(0.2, 2.0, model.m + 1)
    h = rng.exponential(1.0, (100, model.m))
    r = dc.self_concordance_ratio(mu, h, model, coord=model.m)
    assert r.shape == (100,)
    assert np.all(np.isnan(r) | (r >= 0))
