"""One Newton step per epoch on the windowed risk, with sample-size backtracking.

Each epoch draws a fresh batch, takes a single Newton step from the previous
iterate and accepts it once ``||grad R|| < sqrt(2 alpha) V``.  Otherwise the
batch is redrawn ``Gamma`` times larger, the window shrunk by ``gamma`` and
the step retaken from the same starting point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import dual_core
from .errors import PowertrackError
from .model import STREAM_DIAG, SystemModel, make_rng, sample_channel
from .risk import RegParams, SampleWindow, evaluate, log_eps

log = logging.getLogger(__name__)

QUADRATIC_REGION = 0.25


class NumericalError(PowertrackError):
    """Hessian factorization failed."""


@dataclass(frozen=True)
class TrackerConfig:
    n0: int = 200
    m0: int = 5
    gamma: float = 0.5
    Gamma: float = 2.0
    reg: RegParams = field(default_factory=RegParams)
    max_backtracks: int = 3
    damping: str = "pure"

    def __post_init__(self):
        if self.n0 < 1:
            raise ValueError("n0 must be >= 1")
        if self.m0 < 1:
            raise ValueError("m0 must be >= 1")
        if not 0 < self.gamma < 1 < self.Gamma:
            raise ValueError("need 0 < gamma < 1 < Gamma")
        if self.max_backtracks < 1:
            raise ValueError("max_backtracks must be >= 1")
        if self.damping not in ("pure", "damped"):
            raise ValueError(f"unknown damping mode {self.damping!r}")

    def sizes(self, attempt: int) -> tuple[int, int]:
        """Batch size and window length used on backtracking attempt ``attempt``."""
        n = int(math.ceil(self.n0 * self.Gamma ** attempt - 1e-9))
        M = max(1, int(math.ceil(self.m0 * self.gamma ** attempt - 1e-9)))
        return n, M


@dataclass(frozen=True)
class TrackerState:
    mu: np.ndarray
    epoch: int
    last_decrement: float = float("nan")
    last_grad_norm: float = float("nan")
    backtracks_used: int = 0
    n_used: int = 0
    m_used: int = 0


@dataclass(frozen=True)
class Attempt:
    n: int
    M: int
    decrement: float
    grad_norm_before: float
    grad_norm_after: float
    mu: np.ndarray


@dataclass
class EpochStep:
    """What the tracker did during one epoch."""

    epoch: int
    mu_prev: np.ndarray
    mu: np.ndarray
    decrement: float
    grad_norm_before: float
    grad_norm: float
    n_used: int
    m_used: int
    backtracks: int
    converged: bool
    first_pass_ok: bool
    view: SampleWindow
    attempts: list[Attempt]


def newton_direction(grad, hess) -> tuple[np.ndarray, float]:
    """Solve ``hess d = grad`` by Cholesky; return ``(d, decrement)``."""
    try:
        factor = linalg.cho_factor(hess, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"Hessian factorization failed: {exc}") from exc
    d = linalg.cho_solve(factor, grad)
    return d, math.sqrt(max(float(grad @ d), 0.0))


def _damped_update(mu, d, lam, value, risk_fn):
    """Scale by 1/(1 + lam) outside the quadratic region, then halve until R decreases."""
    t = 1.0 / (1.0 + lam) if lam >= QUADRATIC_REGION else 1.0
    for _ in range(60):
        cand = mu - t * d
        if risk_fn(cand) <= value + 1e-12 * max(1.0, abs(value)):
            return cand
        t *= 0.5
    return mu


def newton_step(mu, window: SampleWindow, cfg: TrackerConfig, model: SystemModel):
    """One Newton update on the windowed risk.

    Returns ``(new_mu, decrement, grad_norm)`` where both diagnostics are taken
    at the starting point.
    """
    mu = np.asarray(mu, dtype=float)
    ev = evaluate(mu, window, cfg.reg, model)
    d, lam = newton_direction(ev.grad, ev.hess)
    if cfg.damping == "damped":
        new = _damped_update(mu, d, lam, ev.value,
                             lambda x: evaluate(x, window, cfg.reg, model, order=0).value)
    else:
        new = mu - d
    return new, lam, float(np.linalg.norm(ev.grad))


def initialize(model: SystemModel, cfg: TrackerConfig, seed: int, mu0=None,
               max_iter: int = 500) -> tuple[TrackerState, SampleWindow]:
    """Epoch 0: damped Newton on the first batch until the exit test passes."""
    window = SampleWindow(cfg.m0)
    window.push(0, sample_channel(model.schedule, 0, cfg.n0, seed))
    mu = np.ones(model.m + 1) if mu0 is None else np.array(mu0, dtype=float)
    damped = TrackerConfig(cfg.n0, cfg.m0, cfg.gamma, cfg.Gamma, cfg.reg, cfg.max_backtracks,
                           "damped")
    threshold = cfg.reg.exit_threshold
    lam = gnorm = float("nan")
    for _ in range(max_iter):
        ev = evaluate(mu, window, cfg.reg, model, order=1)
        gnorm = float(np.linalg.norm(ev.grad))
        if gnorm < threshold:
            break
        mu, lam, _ = newton_step(mu, window, damped, model)
    else:
        raise NumericalError("initialization did not reach the exit test")
    return TrackerState(mu, 0, lam, gnorm, 0, cfg.n0, 1), window


def run_epoch(state: TrackerState, cfg: TrackerConfig, model: SystemModel,
              window: SampleWindow, seed: int) -> tuple[TrackerState, EpochStep]:
    """Advance one epoch: sample, step, test, and backtrack if needed.

    ``window`` is updated in place (the new epoch's batch is pushed, and
    replaced on each retry).  If every attempt fails the test the attempt
    with the smallest gradient norm is kept and the epoch is reported as not
    converged.
    """
    k = state.epoch + 1
    mu_prev = np.asarray(state.mu, dtype=float)
    threshold = cfg.reg.exit_threshold
    attempts: list[Attempt] = []
    views: list[SampleWindow] = []
    batches = []
    for a in range(cfg.max_backtracks + 1):
        n, M = cfg.sizes(a)
        batch = sample_channel(model.schedule, k, n, seed, attempt=a)
        if a == 0:
            window.push(k, batch)
        else:
            window.replace_last(k, batch)
        view = window.view(M)
        new, lam, g_before = newton_step(mu_prev, view, cfg, model)
        g_after = float(np.linalg.norm(evaluate(new, view, cfg.reg, model, order=1).grad))
        attempts.append(Attempt(n, M, lam, g_before, g_after, new))
        views.append(view)
        batches.append(batch)
        if g_after < threshold:
            break

    converged = attempts[-1].grad_norm_after < threshold
    pick = len(attempts) - 1 if converged else int(np.argmin([t.grad_norm_after for t in attempts]))
    if pick != len(attempts) - 1:
        window.replace_last(k, batches[pick])
        views[pick] = window.view(attempts[pick].M)
    chosen = attempts[pick]
    if not converged:
        log.info("epoch %d: exit test failed after %d backtracks (best |grad|=%.3g)",
                 k, len(attempts) - 1, chosen.grad_norm_after)
    step = EpochStep(
        epoch=k, mu_prev=mu_prev, mu=chosen.mu, decrement=chosen.decrement,
        grad_norm_before=chosen.grad_norm_before, grad_norm=chosen.grad_norm_after,
        n_used=chosen.n, m_used=len(views[pick]), backtracks=len(attempts) - 1,
        converged=converged, first_pass_ok=attempts[0].grad_norm_after < threshold,
        view=views[pick], attempts=attempts)
    new_state = TrackerState(chosen.mu, k, chosen.decrement, chosen.grad_norm_after,
                             len(attempts) - 1, chosen.n, len(views[pick]))
    return new_state, step


@dataclass(frozen=True)
class ConditionReport:
    cond1_lhs: float
    cond2_lhs: float
    cond1_ok: bool
    cond2_ok: bool
    inputs: dict


def check_tracking_conditions(delta: float, c: float, alpha: float, v_hat: float,
                             v_n: float = 0.0, d_k: float = 0.0, dbar_k: float = 0.0
                             ) -> ConditionReport:
    """Evaluate the two sufficient conditions for single-step tracking.

        sqrt(2 (delta + c V) V / (alpha V)) + (2 sqrt(V) + Dbar) / sqrt(alpha V) < 1/4
        144 (4 V_N + V + 2 D)^2 <= V

    Diagnostic only.
    """
    for name, v in dict(delta=delta, c=c, v_n=v_n, d_k=d_k, dbar_k=dbar_k).items():
        if v < 0:
            raise ValueError(f"{name} must be nonnegative")
    av = alpha * v_hat
    lhs1 = math.sqrt(2.0 * (delta + c * v_hat) * v_hat / av) + (2.0 * math.sqrt(v_hat) + dbar_k) / math.sqrt(av)
    lhs2 = 144.0 * (4.0 * v_n + v_hat + 2.0 * d_k) ** 2
    inputs = dict(delta=delta, c=c, alpha=alpha, v_hat=v_hat, v_n=v_n, d_k=d_k, dbar_k=dbar_k)
    return ConditionReport(lhs1, lhs2, lhs1 < 0.25, lhs2 <= v_hat, inputs)


@dataclass(frozen=True)
class DecrementReport:
    applicable: bool
    sandwich_ok: bool
    quadratic_ok: bool
    lower: float
    upper: float
    quadratic_bound: float


def decrement_diagnostics(prev_subopt: float, new_subopt: float, lam: float,
                      tol: float = 1e-9) -> DecrementReport:
    """Check the decrement sandwich and the quadratic contraction at one epoch.

    Only meaningful inside the quadratic region (``lam < 1/4``):
    ``lam^2 / 6 <= prev_subopt <= lam^2`` and ``new_subopt <= 144 prev_subopt^2``.
    Outside it both checks report True.
    """
    lower, upper = lam * lam / 6.0, lam * lam
    qbound = 144.0 * prev_subopt ** 2
    applicable = lam < QUADRATIC_REGION
    if not applicable:
        return DecrementReport(False, True, True, lower, upper, qbound)
    sandwich = lower - tol <= prev_subopt <= upper + tol
    quad = new_subopt <= qbound + tol
    return DecrementReport(True, sandwich, quad, lower, upper, qbound)


@dataclass(frozen=True)
class ConstantEstimates:
    delta: float
    v_n: float
    d_k: float
    dbar_k: float


def estimate_lipschitz(window: SampleWindow, model: SystemModel, center, radius: float = 0.5,
                       pairs: int = 64, seed: int = 0) -> float:
    """Largest observed gradient-difference ratio of the windowed loss near ``center``.

    Also takes the top Hessian eigenvalue at each sampled point, so the
    estimate is at least the local curvature.
    """
    from .risk import windowed_terms

    rng = make_rng(seed, STREAM_DIAG, 1)
    center = np.asarray(center, dtype=float)
    scale = np.maximum(np.abs(center), 0.05)
    best = 0.0
    for _ in range(pairs):
        a = np.maximum(center * (1 + radius * rng.uniform(-1, 1, center.shape)), 1e-3 * scale)
        b = np.maximum(center * (1 + radius * rng.uniform(-1, 1, center.shape)), 1e-3 * scale)
        ta = windowed_terms(a, window, model)
        gb = windowed_terms(b, window, model, order=1).grad
        best = max(best, float(np.linalg.norm(ta.grad - gb) / np.linalg.norm(a - b)),
                   float(np.linalg.eigvalsh(ta.hess)[-1]))
    return best


def estimate_drift(model: SystemModel, epoch: int, mus, seed: int, big_n: int = 20000
                   ) -> tuple[float, float]:
    """Sup over ``mus`` of |L_{k+1} - L_k| and ||grad L_{k+1} - grad L_k||.

    Both expectations use the same standard-exponential draws rescaled by
    each epoch's mean, so a stationary channel gives exactly zero.
    """
    rng = make_rng(seed, STREAM_DIAG, 2, epoch)
    base = rng.standard_exponential((big_n, model.m))
    h0 = base * model.schedule.mean(epoch)
    h1 = base * model.schedule.mean(epoch + 1)
    d_val = d_grad = 0.0
    for mu in np.atleast_2d(mus):
        f0, f1 = dual_core.dual_loss(mu, h0, model), dual_core.dual_loss(mu, h1, model)
        g0 = dual_core.dual_loss_grad(mu, h0, model).mean(axis=0)
        g1 = dual_core.dual_loss_grad(mu, h1, model).mean(axis=0)
        d_val = max(d_val, abs(float(np.mean(f1) - np.mean(f0))))
        d_grad = max(d_grad, float(np.linalg.norm(g1 - g0)))
    return d_val, d_grad


def barrier_sum(mu, eps: float) -> float:
    """sum_i log_eps(mu_i), the quantity bounded by kappa in the violation bound."""
    return float(np.sum(log_eps(np.asarray(mu, dtype=float), eps)))
