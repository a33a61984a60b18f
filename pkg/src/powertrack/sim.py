"""Non-stationary experiment driver and the metrics reported per epoch.

Each epoch the tracker takes its step on fresh pilot samples, the oracle
(optionally) solves the same windowed problem to high precision, and the
plants are simulated slot by slot under the recovered power policy with
channels drawn independently of the pilot samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import dual_core
from .errors import OracleError
from .model import STREAM_SLOTS, ChannelSchedule, SystemModel, make_rng
from .newton_tracker import (DecrementReport, TrackerConfig, TrackerState, estimate_lipschitz,
                             initialize, decrement_diagnostics, run_epoch)
from .oracle import expected_loss_proxy, solve_epoch_optimum
from .risk import RegParams, SampleWindow, evaluate

log = logging.getLogger(__name__)

OVERFLOW = 1e150


@dataclass
class PlantState:
    """Per-agent scalar states and the slot index reached within the epoch."""

    x: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)

    @classmethod
    def zeros(cls, m: int) -> "PlantState":
        return cls(np.zeros(m), 0)


@dataclass(frozen=True)
class PlantRun:
    """Outcome of one epoch of slots.

    ``states`` has shape ``(T, m)`` (state after each slot); diverged agents
    are frozen at their first overflowing value and report an infinite
    second moment.
    """

    states: np.ndarray
    success_rate: np.ndarray
    expected_success: np.ndarray
    second_moment: np.ndarray
    diverged: np.ndarray
    final: PlantState


def simulate_epoch_plants(mu, schedule: ChannelSchedule, epoch: int, model: SystemModel,
                          slots: int, seed: int, state: PlantState | None = None,
                          forced_y=None, forced_power=None) -> PlantRun:
    """Run every plant for ``slots`` transmission slots of ``epoch``.

    Each slot draws a fresh channel, transmits with the recovered power (or
    ``forced_power``), succeeds with probability q, and updates
    ``x <- a x + sqrt(W) xi`` with ``a`` the closed-loop gain on success and
    the open-loop gain otherwise.  ``forced_y`` replaces the success coin by
    one with fixed probability, independent of the channel.
    """
    if slots < 1:
        raise ValueError("slots must be >= 1")
    m = model.m
    mu = np.asarray(mu, dtype=float)
    rng = make_rng(seed, STREAM_SLOTS, epoch)
    h = rng.exponential(schedule.mean(epoch), size=(slots, m))
    coin = rng.uniform(size=(slots, m))
    xi = rng.standard_normal((slots, m))

    if forced_y is not None:
        q = np.broadcast_to(np.asarray(forced_y, dtype=float), (slots, m))
    else:
        if forced_power is not None:
            p = np.broadcast_to(np.asarray(forced_power, dtype=float), (slots, m))
        else:
            p, _ = dual_core.power_policy(h, mu[:m], mu[m], model.p0)
        q = model.success.q(h, p)
    success = coin < q
    gains = np.where(success, [pl.a_closed for pl in model.plants],
                     [pl.a_open for pl in model.plants])
    noise = xi * np.sqrt(model.noise_var)

    x = np.zeros(m) if state is None else np.array(state.x, dtype=float)
    diverged = ~np.isfinite(x) | (np.abs(x) > OVERFLOW)
    states = np.empty((slots, m))
    for t in range(slots):
        step = gains[t] * x + noise[t]
        x = np.where(diverged, x, step)
        diverged |= np.abs(x) > OVERFLOW
        states[t] = x

    tail = states[slots // 2:]
    with np.errstate(over="ignore"):
        m2 = np.mean(tail * tail, axis=0)
    m2 = np.where(diverged, np.inf, m2)
    t0 = 0 if state is None else state.t
    return PlantRun(states, success.mean(axis=0), np.mean(q, axis=0), m2, diverged,
                    PlantState(x, t0 + slots))


@dataclass(frozen=True)
class BoundConstants:
    """Constants entering the constraint-violation bound.

    delta : smoothness (gradient Lipschitz) constant of the expected loss
    v_n   : statistical accuracy of the window
    rho   : regularization bias factor
    kappa : upper bound on sum_i log_eps(mu_i)
    k_hat : bound on the optimal multiplier norm
    """

    delta: float
    v_n: float
    rho: float
    kappa: float
    k_hat: float

    def c_const(self, beta: float) -> float:
        return 1.0 + self.rho + beta * self.kappa

    def violation_bound(self, reg: RegParams) -> float:
        return math.sqrt(2.0 * self.delta * (self.v_n + self.c_const(reg.beta) * reg.v_hat))

    def perf_gap_bound(self, reg: RegParams) -> float:
        a = reg.alpha
        return ((1.0 + self.c_const(reg.beta)) * self.delta
                * (1.0 / a + 2.0 * reg.v_hat * (math.sqrt(2.0 / a) + self.k_hat)))


def conservative_constants(window: SampleWindow, model: SystemModel, reg: RegParams, mu_ref,
                           seed: int = 0, safety: float = 2.0, c_v: float = 1.0
                           ) -> BoundConstants:
    """Conservative plug-in estimates of the bound constants around ``mu_ref``.

    delta is ``safety`` times the largest gradient-difference ratio (or
    Hessian eigenvalue) sampled within 50% of ``mu_ref``; ``v_n = c_v / sqrt(N)``
    for the ``N`` samples in the window; ``k_hat = safety * ||mu_ref||``.
    The iterate norm is bounded by ``B = sqrt(2/alpha) + k_hat``, giving
    ``rho = (m+1) beta + alpha B^2 / 2`` (barrier plus quadratic bias) and
    ``kappa = max(0, (m+1) log B)``.
    """
    mu_ref = np.asarray(mu_ref, dtype=float)
    delta = safety * estimate_lipschitz(window, model, mu_ref, seed=seed)
    v_n = c_v / math.sqrt(window.total_samples)
    k_hat = safety * float(np.linalg.norm(mu_ref))
    big = math.sqrt(2.0 / reg.alpha) + k_hat
    m1 = model.m + 1
    rho = m1 * reg.beta + 0.5 * reg.alpha * big * big
    kappa = max(0.0, m1 * math.log(big))
    return BoundConstants(delta, v_n, rho, kappa, k_hat)


@dataclass(frozen=True)
class ViolationReport:
    power_violation: float
    power_violation_se: float
    y_violation_norm: float
    y_violation_se: float
    bound: float
    expected_success: np.ndarray
    targets: np.ndarray


def violation_metrics(mu, model: SystemModel, epoch: int, reg: RegParams,
                      constants: BoundConstants, window: SampleWindow | None = None,
                      big_n: int = 20_000, seed: int = 0) -> ViolationReport:
    """Constraint violations at ``mu`` next to their theoretical bound.

    The gradient of the expected dual loss is exactly the vector of constraint
    slacks, so both violations are read off a gradient estimate: the proxy
    with ``big_n`` fresh draws by default, or the empirical window if one is
    given (standard errors are then reported as 0).
    """
    mu = np.asarray(mu, dtype=float)
    m = model.m
    bound = constants.violation_bound(reg)
    if window is not None:
        from .risk import windowed_terms
        grad = windowed_terms(mu, window, model, order=1).grad
        se = np.zeros(m + 1)
        targets, _ = dual_core.target_policy(mu[:m], model)
        expected_success = grad[:m] + targets
    else:
        est = expected_loss_proxy(mu, model.schedule, epoch, model, big_n=big_n, seed=seed)
        grad, se = est.grad, est.grad_se
        targets, expected_success = est.targets, est.expected_success
    slack_y = grad[:m]
    ynorm = float(np.linalg.norm(slack_y))
    # delta-method standard error of the norm
    yse = float(np.sqrt(np.sum((slack_y / ynorm) ** 2 * se[:m] ** 2))) if ynorm > 0 else 0.0
    return ViolationReport(power_violation=float(-grad[m]), power_violation_se=float(se[m]),
                           y_violation_norm=ynorm, y_violation_se=yse, bound=bound,
                           expected_success=expected_success, targets=targets)


@dataclass
class EpochTrace:
    """Everything recorded for one epoch.  Oracle fields are NaN when disabled."""

    epoch: int
    mu: np.ndarray
    mu_star: np.ndarray | None
    reg_risk_subopt: float
    pre_subopt: float
    grad_norm: float
    decrement: float
    J_sum: float
    J_opt: float
    power_violation: float
    power_violation_se: float
    y_violation_norm: float
    y_violation_se: float
    violation_bound: float
    perf_gap_bound: float
    n_used: int
    m_used: int
    backtracks: int
    unconverged: bool
    first_pass_ok: bool
    success_rate: np.ndarray
    state_m2: np.ndarray
    expected_success: np.ndarray
    targets: np.ndarray
    omega: np.ndarray
    channel_mean: float
    diverged: np.ndarray
    decrement_check: DecrementReport | None = None
    error: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    epochs: int = 200
    slots_per_epoch: int = 200
    seed: int = 0
    oracle: bool = True
    proxy_n: int = 20_000

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.slots_per_epoch < 1:
            raise ValueError("slots_per_epoch must be >= 1")
        if self.proxy_n < 1:
            raise ValueError("proxy_n must be >= 1")


def _omega(model: SystemModel, expected_success) -> np.ndarray:
    return model.a_open_sq - np.asarray(expected_success) * model.gain_gap


def _perf_sum(mu, model: SystemModel) -> float:
    y, _ = dual_core.target_policy(np.asarray(mu)[: model.m], model)
    return float(np.sum(dual_core.perf_values(y, model)))


@dataclass
class Experiment:
    """Stateful epoch loop; ``run_experiment`` drives it to completion."""

    model: SystemModel
    cfg: TrackerConfig
    exp: ExperimentConfig
    plant_state: PlantState = field(init=False)
    constants: BoundConstants | None = field(init=False, default=None)

    def __post_init__(self):
        self.plant_state = PlantState.zeros(self.model.m)
        self.state: TrackerState | None = None
        self.window: SampleWindow | None = None

    def _oracle(self, view, mu, mu_prev):
        reg = self.cfg.reg
        sol = solve_epoch_optimum(view, reg, self.model, x0=mu)
        post = evaluate(mu, view, reg, self.model, order=0).value - sol.value
        pre = (float("nan") if mu_prev is None
               else evaluate(mu_prev, view, reg, self.model, order=0).value - sol.value)
        return sol, post, pre

    def _trace(self, epoch, mu, mu_prev, view, lam, gnorm, n_used, m_used, backtracks,
               converged, first_ok) -> EpochTrace:
        model, reg, seed = self.model, self.cfg.reg, self.exp.seed
        mu_star, sub, pre, j_opt, decrement_check, err = None, math.nan, math.nan, math.nan, None, ""
        if self.exp.oracle:
            try:
                sol, sub, pre = self._oracle(view, mu, mu_prev)
                mu_star, j_opt = sol.mu, _perf_sum(sol.mu, model)
                if mu_prev is not None:
                    decrement_check = decrement_diagnostics(pre, sub, lam)
            except OracleError as exc:
                err = f"oracle: {exc}"
                log.warning("epoch %d: %s", epoch, err)
        if self.constants is None:
            ref = mu if mu_star is None else mu_star
            self.constants = conservative_constants(view, model, reg, ref, seed=seed)
        viol = violation_metrics(mu, model, epoch, reg, self.constants,
                                 big_n=self.exp.proxy_n, seed=seed)
        run = simulate_epoch_plants(mu, model.schedule, epoch, model,
                                    self.exp.slots_per_epoch, seed, PlantState(self.plant_state.x))
        self.plant_state = run.final
        return EpochTrace(
            epoch=epoch, mu=np.array(mu), mu_star=mu_star, reg_risk_subopt=sub, pre_subopt=pre,
            grad_norm=gnorm, decrement=lam, J_sum=_perf_sum(mu, model), J_opt=j_opt,
            power_violation=viol.power_violation, power_violation_se=viol.power_violation_se,
            y_violation_norm=viol.y_violation_norm, y_violation_se=viol.y_violation_se,
            violation_bound=viol.bound, perf_gap_bound=self.constants.perf_gap_bound(reg),
            n_used=n_used, m_used=m_used, backtracks=backtracks, unconverged=not converged,
            first_pass_ok=first_ok, success_rate=run.success_rate, state_m2=run.second_moment,
            expected_success=viol.expected_success, targets=viol.targets,
            omega=_omega(model, viol.expected_success),
            channel_mean=model.schedule.mean(epoch), diverged=run.diverged,
            decrement_check=decrement_check, error=err)

    def start(self) -> EpochTrace:
        self.state, self.window = initialize(self.model, self.cfg, self.exp.seed)
        s = self.state
        return self._trace(0, s.mu, None, self.window.view(1), s.last_decrement,
                           s.last_grad_norm, s.n_used, s.m_used, 0, True, True)

    def step(self) -> EpochTrace:
        self.state, st = run_epoch(self.state, self.cfg, self.model, self.window, self.exp.seed)
        return self._trace(st.epoch, st.mu, st.mu_prev, st.view, st.decrement, st.grad_norm,
                           st.n_used, st.m_used, st.backtracks, st.converged, st.first_pass_ok)


def run_experiment(model: SystemModel, cfg: TrackerConfig, exp: ExperimentConfig,
                   progress=None) -> list[EpochTrace]:
    """Run ``exp.epochs`` epochs (epoch 0 is the initial solve) and return their traces.

    ``progress``, if given, is called with each trace as it is produced.
    """
    runner = Experiment(model, cfg, exp)
    traces = [runner.start()]
    if progress is not None:
        progress(traces[-1])
    for _ in range(1, exp.epochs):
        traces.append(runner.step())
        if progress is not None:
            progress(traces[-1])
    return traces


@dataclass(frozen=True)
class StabilityReport:
    omega: np.ndarray
    omega_ok: bool
    max_omega: np.ndarray
    m2_measured: np.ndarray
    m2_bound: np.ndarray
    m2_ok: bool
    diverged: bool
    success_floor_ok: bool

    @property
    def ok(self) -> bool:
        return self.omega_ok and self.m2_ok and not self.diverged


def stability_check(traces: list[EpochTrace], model: SystemModel, slack: float = 2.0
                    ) -> StabilityReport:
    """Margin and second-moment checks over a run.

    The margin ``a_open^2 - E[q] (a_open^2 - a_closed^2)`` must stay below 1
    for every agent at every epoch.  The measured second moment (per agent,
    averaged over the last half of the epochs) must not exceed
    ``slack * W / (1 - max margin)``.  Also reports whether the realized
    expected success never fell below the target minus the violation bound.
    """
    if not traces:
        raise ValueError("traces must be non-empty")
    omega = np.array([t.omega for t in traces])
    max_omega = omega.max(axis=0)
    omega_ok = bool(np.all(omega < 1.0))
    tail = traces[len(traces) // 2:]
    with np.errstate(over="ignore", invalid="ignore"):
        m2 = np.mean([t.state_m2 for t in tail], axis=0)
        bound = np.where(max_omega < 1.0, slack * model.noise_var / (1.0 - max_omega), np.inf)
    m2_ok = bool(np.all(max_omega < 1.0) and np.all(m2 <= bound))
    diverged = bool(any(np.any(t.diverged) for t in traces))
    floor_ok = bool(all(np.all(t.expected_success >= t.targets - t.violation_bound)
                        for t in traces))
    return StabilityReport(omega, omega_ok, max_omega, m2, bound, m2_ok, diverged, floor_ok)
