"""Reference computations used as ground truth by tests and experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import dual_core
from .errors import OracleError
from .model import STREAM_PROXY, ChannelSchedule, SystemModel, make_rng
from .newton_tracker import QUADRATIC_REGION, NumericalError, newton_direction
from .risk import RegParams, SampleWindow, evaluate

_PROXY_CHUNK = 50_000


@dataclass(frozen=True)
class OracleSolution:
    mu: np.ndarray
    value: float
    grad_norm: float
    iterations: int


def _minimize(mu, window, reg, model, tol, max_iter):
    mu = np.array(mu, dtype=float)
    for it in range(max_iter):
        ev = evaluate(mu, window, reg, model)
        gnorm = float(np.linalg.norm(ev.grad))
        if gnorm <= tol:
            return OracleSolution(mu, ev.value, gnorm, it)
        try:
            d, lam = newton_direction(ev.grad, ev.hess)
        except NumericalError as exc:
            raise OracleError(str(exc)) from exc
        t = 1.0 / (1.0 + lam) if lam >= QUADRATIC_REGION else 1.0
        # accept once either the value or the gradient norm improves; near the
        # optimum value differences fall below rounding and only the gradient is informative
        for _ in range(60):
            cand = mu - t * d
            cev = evaluate(cand, window, reg, model, order=1)
            if cev.value < ev.value or np.linalg.norm(cev.grad) < gnorm:
                break
            t *= 0.5
        else:
            raise OracleError(f"line search stalled at |grad|={gnorm:.3g}")
        mu = cand
    raise OracleError(f"no convergence in {max_iter} iterations")


def solve_epoch_optimum(window: SampleWindow, reg: RegParams, model: SystemModel,
                        tol: float = 1e-10, x0=None, starts: int = 3,
                        max_iter: int = 10_000, agree: float = 1e-8) -> OracleSolution:
    """Minimizer of the windowed risk by damped Newton from several starts.

    Raises OracleError when a start fails to reach ``||grad|| <= tol`` or
    when the optimal values found from different starts differ by more than
    ``agree``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    m1 = model.m + 1
    inits = [] if x0 is None else [np.asarray(x0, dtype=float)]
    for scale in (1.0, 0.2, 5.0):
        if len(inits) >= max(starts, 1):
            break
        inits.append(np.full(m1, scale))
    sols = [_minimize(x, window, reg, model, tol, max_iter) for x in inits]
    values = [s.value for s in sols]
    if max(values) - min(values) > agree:
        raise OracleError(f"restarts disagree: values {values}")
    return min(sols, key=lambda s: s.value)


def grid_recover(agent: int, h: float, mu, model: SystemModel, resolution: int = 10_000) -> float:
    """Power maximizing the per-sample Lagrangian over a uniform grid on [0, p0]."""
    if resolution < 1000:
        raise ValueError("resolution must be >= 1000")
    mu = np.asarray(mu, dtype=float)
    grid = np.linspace(0.0, model.p0, resolution + 1)
    obj = mu[agent] * model.success.q(h, grid) - mu[model.m] * grid
    return float(grid[int(np.argmax(obj))])


def reference_power(h: float, mu_agent: float, mu_budget: float, p0: float) -> float:
    """Power maximizer by Brent root-finding on the derivative (positive inputs)."""
    def deriv(p):
        return mu_agent * h * math.exp(-h * p) - mu_budget

    if h <= 0 or deriv(0.0) <= 0:
        return 0.0
    if deriv(p0) >= 0:
        return p0
    return optimize.brentq(deriv, 0.0, p0, xtol=1e-14, rtol=1e-15, maxiter=500)


def reference_target(agent: int, mu_agent: float, model: SystemModel) -> float:
    """Target maximizer by Brent root-finding on J'(y) - mu."""
    plant = model.plants[agent]
    gap = plant.gain_gap
    lo = model.y_min[agent] + dual_core.DELTA_STAB

    def deriv(y):
        return plant.noise_var * gap / (1 - plant.a_open ** 2 + y * gap) ** 2 - mu_agent

    if mu_agent <= 0 or deriv(1.0) >= 0:
        return 1.0
    if deriv(lo) <= 0:
        return lo
    return optimize.brentq(deriv, lo, 1.0, xtol=1e-14, rtol=1e-15, maxiter=500)


@dataclass(frozen=True)
class ProxyEstimate:
    """Monte-Carlo estimate of the expected dual loss and its gradient."""

    value: float
    value_se: float
    grad: np.ndarray
    grad_se: np.ndarray
    expected_power: np.ndarray
    expected_success: np.ndarray
    targets: np.ndarray
    n: int


def expected_loss_proxy(mu, schedule: ChannelSchedule, epoch: int, model: SystemModel,
                        big_n: int = 100_000, seed: int = 0, stream: int = STREAM_PROXY,
                        attempt: int = 0) -> ProxyEstimate:
    """Sample-average approximation of E_h f(mu, h) with ``big_n`` fresh draws.

    Draws come from the counter-based stream ``(seed, stream, epoch, attempt)``
    in chunks; passing the pilot stream and ``big_n = n`` reproduces the
    tracker's own batch exactly.
    """
    if big_n < 1:
        raise ValueError("big_n must be >= 1")
    mu = np.asarray(mu, dtype=float)
    m = model.m
    rng = make_rng(seed, stream, epoch, attempt)
    u = schedule.mean(epoch)
    s1 = s2 = 0.0
    g1 = np.zeros(m + 1)
    g2 = np.zeros(m + 1)
    psum = np.zeros(m)
    done = 0
    y = None
    while done < big_n:
        k = min(_PROXY_CHUNK, big_n - done)
        h = rng.exponential(u, size=(k, m))
        rec = dual_core.recover(mu, h, model)
        f = dual_core.dual_loss(mu, h, model, rec)
        g = dual_core.dual_loss_grad(mu, h, model, rec)
        s1 += float(f.sum())
        s2 += float((f * f).sum())
        g1 += g.sum(axis=0)
        g2 += (g * g).sum(axis=0)
        psum += rec.powers.sum(axis=0)
        y = rec.targets
        done += k
    n = big_n
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0)
    gmean = g1 / n
    gvar = np.maximum(g2 / n - gmean * gmean, 0.0)
    return ProxyEstimate(
        value=mean, value_se=math.sqrt(var / n), grad=gmean, grad_se=np.sqrt(gvar / n),
        expected_power=psum / n, expected_success=gmean[:m] + y, targets=y, n=n)
