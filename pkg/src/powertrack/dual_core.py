"""Per-sample dual loss, its envelope gradient and its Hessian in the multipliers.

The multiplier vector ``mu`` has length ``m + 1``: one entry per success-rate
constraint followed by the power-budget multiplier.  Channel input ``h`` is
either one vector of shape ``(m,)`` or a batch of shape ``(n, m)``; the
per-sample outputs then carry a leading axis of length ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SystemModel

# Clearance kept above the stability threshold when recovering targets.
DELTA_STAB = 1e-6

# Recovery status codes.
INTERIOR = 0
LOWER = 1
UPPER = 2
ENDPOINT = 3


@dataclass(frozen=True)
class PrimalRecovery:
    """Lagrangian maximizers at one multiplier vector.

    ``powers`` has the shape of the channel input; ``targets`` has shape
    ``(m,)``.  The status arrays use the module codes INTERIOR, LOWER, UPPER,
    ENDPOINT.
    """

    powers: np.ndarray
    targets: np.ndarray
    power_status: np.ndarray
    target_status: np.ndarray


def bisect_argmax(deriv, lo, hi, iters=80):
    """Maximizer of a concave function on [lo, hi] from its derivative.

    Vectorized: ``deriv`` maps an array of points to derivatives, and
    ``lo``/``hi`` broadcast together.
    """
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    a, b = lo.copy(), hi.copy()
    d_lo, d_hi = deriv(a), deriv(b)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        up = deriv(mid) > 0
        a = np.where(up, mid, a)
        b = np.where(up, b, mid)
    x = 0.5 * (a + b)
    x = np.where(d_lo <= 0, lo, x)
    return np.where(d_hi >= 0, hi, x)


def power_policy(h, mu_agent, mu_budget, p0):
    """Argmax over p in [0, p0] of ``mu_agent * q(h, p) - mu_budget * p``.

    Returns ``(p, status)``.  In the regular region (all three inputs
    positive) the stationarity condition gives ``p = log(mu_agent h / mu_budget) / h``
    clipped to the box; elsewhere the objective is monotone or convex and the
    better endpoint wins (ties go to 0).
    """
    h, a, b = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(mu_agent, dtype=float),
                                  np.asarray(mu_budget, dtype=float))
    regular = (a > 0) & (b > 0) & (h > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(regular, a * h / np.where(regular, b, 1.0), 0.0)
        free = np.where(ratio > 1, np.log(np.where(ratio > 1, ratio, 1.0)) / np.where(h > 0, h, 1.0), 0.0)
    p_reg = np.clip(free, 0.0, p0)
    status_reg = np.where(free <= 0, LOWER, np.where(free >= p0, UPPER, INTERIOR))
    g_top = a * -np.expm1(-h * p0) - b * p0
    p_end = np.where(g_top > 0, p0, 0.0)
    p = np.where(regular, p_reg, p_end)
    status = np.where(regular, status_reg, ENDPOINT)
    return p, status


def power_policy_bisect(h, mu_agent, mu_budget, p0, iters=80):
    """Same maximizer via derivative bisection; valid when ``mu_agent >= 0``."""
    h, a, b = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(mu_agent, dtype=float),
                                  np.asarray(mu_budget, dtype=float))
    return bisect_argmax(lambda p: a * h * np.exp(-h * p) - b, 0.0, np.full(h.shape, float(p0)),
                         iters)


def target_policy(mu_agents, model: SystemModel):
    """Argmax over y of ``J_i(y) - mu_i y`` for every agent.

    Stationarity ``W D / d(y)^2 = mu`` with ``d(y) = 1 - a_open^2 + y D``
    gives ``y = (a_open^2 - 1 + sqrt(W D / mu)) / D``, clipped to
    ``[y_min + DELTA_STAB, 1]``.  Nonpositive multipliers return 1.
    """
    mu = np.asarray(mu_agents, dtype=float)
    gap, w = model.gain_gap, model.noise_var
    lower = model.y_min + DELTA_STAB
    pos = mu > 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        free = (model.a_open_sq - 1.0 + np.sqrt(w * gap / np.where(pos, mu, 1.0))) / gap
    free = np.where(pos, free, np.inf)
    y = np.clip(free, lower, 1.0)
    status = np.where(free <= lower, LOWER, np.where(free >= 1.0, UPPER, INTERIOR))
    return y, status


def target_policy_bisect(mu_agents, model: SystemModel, iters=80):
    mu = np.asarray(mu_agents, dtype=float)
    gap, w = model.gain_gap, model.noise_var
    base = 1.0 - model.a_open_sq

    def deriv(y):
        return w * gap / (base + y * gap) ** 2 - mu

    return bisect_argmax(deriv, model.y_min + DELTA_STAB, np.ones_like(mu), iters)


def recover(mu, h, model: SystemModel) -> PrimalRecovery:
    mu = np.asarray(mu, dtype=float)
    m = model.m
    p, ps = power_policy(h, mu[:m], mu[m], model.p0)
    y, ys = target_policy(mu[:m], model)
    return PrimalRecovery(p, y, ps, ys)


def recover_power(agent: int, h, mu, model: SystemModel):
    """Transmit power of ``agent`` at channel gain(s) ``h``."""
    mu = np.asarray(mu, dtype=float)
    p, _ = power_policy(h, mu[agent], mu[model.m], model.p0)
    return float(p) if p.ndim == 0 else p


def recover_target(agent: int, mu, model: SystemModel) -> float:
    """Target success rate of ``agent``."""
    mu = np.asarray(mu, dtype=float)
    y, _ = target_policy(mu[: model.m], model)
    return float(y[agent])


def perf_values(y, model: SystemModel) -> np.ndarray:
    """Per-agent control performance J_i(y_i) (vectorized, no domain check)."""
    return -model.noise_var / (1.0 - model.a_open_sq + np.asarray(y) * model.gain_gap)


def dual_loss(mu, h, model: SystemModel, rec: PrimalRecovery | None = None):
    """f(mu, h) = sum J(y) + sum mu_i (q_i - y_i) + mu_budget (budget - sum p)."""
    mu = np.asarray(mu, dtype=float)
    rec = rec if rec is not None else recover(mu, h, model)
    m = model.m
    q = model.success.q(h, rec.powers)
    val = (perf_values(rec.targets, model).sum()
           + (q - rec.targets) @ mu[:m]
           + mu[m] * (model.budget - rec.powers.sum(axis=-1)))
    return float(val) if np.ndim(val) == 0 else val


def dual_loss_grad(mu, h, model: SystemModel, rec: PrimalRecovery | None = None):
    """Envelope gradient: the constraint slacks ``[q - y, budget - sum p]``."""
    mu = np.asarray(mu, dtype=float)
    rec = rec if rec is not None else recover(mu, h, model)
    q = model.success.q(h, rec.powers)
    slack_y = q - rec.targets
    slack_p = model.budget - rec.powers.sum(axis=-1)
    return np.concatenate([slack_y, np.expand_dims(slack_p, -1)], axis=-1)


def dual_loss_hess(mu, h, model: SystemModel, rec: PrimalRecovery | None = None):
    """Hessian of f in mu, per sample.

    Each agent with an interior power contributes the rank-one block
    ``(1/h) [mu_b/mu_i^2, -1/mu_i; -1/mu_i, 1/mu_b]`` on coordinates
    ``(i, budget)``; an interior target adds ``-dy/dmu_i`` to the diagonal.
    Clipped coordinates contribute nothing.
    """
    mu = np.asarray(mu, dtype=float)
    rec = rec if rec is not None else recover(mu, h, model)
    m = model.m
    h = np.asarray(h, dtype=float)
    a, b = mu[:m], mu[m]
    inside = rec.power_status == INTERIOR
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv_h = np.where(inside, 1.0 / np.where(inside, h, 1.0), 0.0)
        h_aa = inv_h * (b / a) / a  # a * a can underflow
        h_ab = -inv_h / a
        h_bb = inv_h / b
    h_aa = np.where(inside, h_aa, 0.0)
    h_ab = np.where(inside, h_ab, 0.0)
    h_bb = np.where(inside, h_bb, 0.0)

    t_inside = rec.target_status == INTERIOR
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        dy = 0.5 * np.sqrt(model.noise_var * model.gain_gap) * a ** -1.5 / model.gain_gap
    h_aa = h_aa + np.where(t_inside, dy, 0.0)

    out = np.zeros(h.shape[:-1] + (m + 1, m + 1))
    idx = np.arange(m)
    out[..., idx, idx] = h_aa
    out[..., idx, m] = h_ab
    out[..., m, idx] = h_ab
    out[..., m, m] = h_bb.sum(axis=-1)
    return out


def kink_count(mu, h, model: SystemModel) -> int:
    """Number of recoveries sitting exactly on a clip boundary.

    The Hessian there is taken from the clipped (zero) side.
    """
    mu = np.asarray(mu, dtype=float)
    h = np.asarray(h, dtype=float)
    m = model.m
    a, b = mu[:m], mu[m]
    regular = (a > 0) & (b > 0) & (h > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        free = np.log(a * h / b) / h
    at_power = regular & ((free == 0) | (free == model.p0))
    with np.errstate(divide="ignore", invalid="ignore"):
        y_free = (model.a_open_sq - 1.0 + np.sqrt(model.noise_var * model.gain_gap / a)) / model.gain_gap
    at_target = (a > 0) & ((y_free == model.y_min + DELTA_STAB) | (y_free == 1.0))
    return int(np.count_nonzero(at_power) + np.count_nonzero(at_target))


def self_concordance_ratio(mu, h, model: SystemModel, coord: int, step: float = 1e-5):
    """|f'''| / (f'')^(3/2) along one coordinate, third derivative by central differences.

    Values <= 2 are consistent with self-concordance along that axis.  Returns
    ``nan`` where the curvature vanishes.
    """
    mu = np.asarray(mu, dtype=float)
    e = np.zeros_like(mu)
    e[coord] = step
    d2 = dual_loss_hess(mu, h, model)[..., coord, coord]
    d3 = (dual_loss_hess(mu + e, h, model)[..., coord, coord]
          - dual_loss_hess(mu - e, h, model)[..., coord, coord]) / (2 * step)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d2 > 0, np.abs(d3) / d2 ** 1.5, np.nan)
