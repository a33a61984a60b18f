"""Command-line driver: config ingestion, experiment runs and CSV export.

    powertrack simulate --config cfg.json --out trace.csv
    powertrack diagnose --config cfg.json
    powertrack oracle   --config cfg.json --epoch 3
    powertrack selftest

Exit codes: 0 success, 1 config error, 2 runtime error, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import dual_core, oracle
from .errors import ConfigError, PowertrackError
from .model import (STREAM_DIAG, ChannelSchedule, PlantParams, SuccessModel, SystemModel,
                    make_rng, sample_channel)
from .newton_tracker import TrackerConfig, check_tracking_conditions, estimate_drift
from .risk import RegParams, SampleWindow
from .sim import EpochTrace, Experiment, ExperimentConfig, run_experiment

log = logging.getLogger("powertrack")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3

_REQUIRED = object()


class RunConfig(NamedTuple):
    model: SystemModel
    tracker: TrackerConfig
    experiment: ExperimentConfig


# Schema: section -> {key: (type, default)}.  ``float`` fields accept ints.
_PLANT = {"a_open": (float, _REQUIRED), "a_closed": (float, _REQUIRED),
          "noise_var": (float, _REQUIRED)}
_SCHEMA = {
    "success": {"kind": (str, "negexp"), "p_max_per_agent": (float, _REQUIRED)},
    "schedule": {"mean_init": (float, 1.0), "drift_rate": (float, 0.0),
                 "drift_mode": (str, "bounce"), "bounds": (list, None),
                 "family": (str, "exponential")},
    "reg": {"alpha": (float, 1.0), "beta": (float, 1.0), "eps": (float, 1e-3),
            "v_hat": (float, 0.03)},
    "tracker": {"n0": (int, 200), "m0": (int, 5), "gamma": (float, 0.5),
                "Gamma": (float, 2.0), "max_backtracks": (int, 3), "damping": (str, "pure")},
    "experiment": {"epochs": (int, 200), "slots_per_epoch": (int, 200), "seed": (int, 0),
                   "oracle": (bool, True), "proxy_n": (int, 20_000)},
}
_TOP = {"plants", "budget", *_SCHEMA}


def _typed(value, kind, path):
    # bool is an int subclass; keep them apart
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {type(value).__name__}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {type(value).__name__}")
        return value
    if not isinstance(value, kind):
        raise ConfigError(path, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _section(raw, schema, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected an object")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    out = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            out[key] = _typed(raw[key], kind, f"{path}.{key}")
        elif default is _REQUIRED:
            raise ConfigError(f"{path}.{key}", "missing required key")
        else:
            out[key] = default
    return out


def _build(path, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def config_from_dict(raw: dict) -> RunConfig:
    """Validate a parsed config document and build the run objects."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected an object")
    unknown = sorted(set(raw) - _TOP)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if "plants" not in raw:
        raise ConfigError("plants", "missing required key")
    plants_raw = _typed(raw["plants"], list, "plants")
    if not plants_raw:
        raise ConfigError("plants", "at least one plant is required")
    plants = []
    for i, p in enumerate(plants_raw):
        fields = _section(p, _PLANT, f"plants[{i}]")
        plants.append(_build(f"plants[{i}]", PlantParams, **fields))
    if "budget" not in raw:
        raise ConfigError("budget", "missing required key")
    budget = _typed(raw["budget"], float, "budget")

    sec = {name: _section(raw.get(name), schema, name) for name, schema in _SCHEMA.items()}
    success = _build("success", SuccessModel, **sec["success"])
    sched = dict(sec["schedule"])
    if sched["bounds"] is not None:
        b = sched["bounds"]
        if len(b) != 2:
            raise ConfigError("schedule.bounds", "expected [low, high]")
        sched["bounds"] = tuple(_typed(v, float, f"schedule.bounds[{j}]") for j, v in enumerate(b))
    schedule = _build("schedule", ChannelSchedule, m=len(plants), **sched)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = _build("<model>", SystemModel, plants=tuple(plants), success=success,
                       schedule=schedule, budget=budget)
    reg = _build("reg", RegParams, **sec["reg"])
    tr = sec["tracker"]
    if not 0 < tr["gamma"] < 1:
        raise ConfigError("tracker.gamma", "must lie in (0, 1)")
    if not tr["Gamma"] > 1:
        raise ConfigError("tracker.Gamma", "must exceed 1")
    tracker = _build("tracker", TrackerConfig, reg=reg, **tr)
    experiment = _build("experiment", ExperimentConfig, **sec["experiment"])
    return RunConfig(model, tracker, experiment)


def parse_config(path) -> RunConfig:
    """Read and validate a JSON config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(raw)


def config_to_dict(config: RunConfig) -> dict:
    """Inverse of ``config_from_dict``; every field is written explicitly."""
    model, tracker, exp = config
    sched = model.schedule
    tr = asdict(tracker)
    reg = tr.pop("reg")
    return {
        "plants": [asdict(p) for p in model.plants],
        "success": asdict(model.success),
        "schedule": {"mean_init": sched.mean_init, "drift_rate": sched.drift_rate,
                     "drift_mode": sched.drift_mode,
                     "bounds": None if sched.bounds is None else list(sched.bounds),
                     "family": sched.family},
        "budget": model.budget,
        "reg": reg,
        "tracker": tr,
        "experiment": asdict(exp),
    }


def default_config_path() -> Path:
    """The shipped reference config."""
    return Path(str(resources.files("powertrack") / "data" / "default.json"))


# ---- CSV trace ---------------------------------------------------------------------------

def csv_columns(m: int) -> list[str]:
    names = [f"mu_{i + 1}" for i in range(m)] + ["mu_tilde"]
    star = [f"mu_star_{i + 1}" for i in range(m)] + ["mu_star_tilde"]
    return (["epoch"] + names + star
            + ["subopt", "grad_norm", "decrement", "J_sum", "J_opt", "power_violation",
               "y_violation", "n_used", "M_used", "backtracks", "unconverged"]
            + [f"success_rate_{i + 1}" for i in range(m)]
            + [f"state_m2_{i + 1}" for i in range(m)])


def _num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else format(x, ".17g")


def trace_row(t: EpochTrace, m: int) -> list[str]:
    star = [""] * (m + 1) if t.mu_star is None else [_num(v) for v in t.mu_star]
    return ([str(t.epoch)] + [_num(v) for v in t.mu] + star
            + [_num(t.reg_risk_subopt), _num(t.grad_norm), _num(t.decrement), _num(t.J_sum),
               _num(t.J_opt), _num(t.power_violation), _num(t.y_violation_norm),
               str(t.n_used), str(t.m_used), str(t.backtracks), str(int(t.unconverged))]
            + [_num(v) for v in t.success_rate] + [_num(v) for v in t.state_m2])


def write_trace(traces, m: int, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(csv_columns(m))
    for t in traces:
        writer.writerow(trace_row(t, m))


def read_trace(path) -> tuple[list[str], np.ndarray]:
    """Load a CSV trace; blank cells become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(c) if c else math.nan for c in r] for r in rows[1:]])
    return header, data.reshape(len(rows) - 1, len(header))


ORACLE_NOTE = ("mu_star minimizes the same regularized windowed risk the tracker stepped on "
               "(same batches, window length and regularization) by multi-start damped Newton "
               "to gradient norm 1e-10; subopt = R(mu) - R(mu_star). Violations use a fresh "
               "Monte-Carlo proxy of the expected loss gradient.")


def _meta(config: RunConfig, columns) -> dict:
    from . import __version__
    return {"version": __version__, "columns": columns, "config": config_to_dict(config),
            "oracle": ORACLE_NOTE if config.experiment.oracle else "disabled"}


# ---- subcommands -------------------------------------------------------------------------

def _load(args) -> RunConfig:
    cfg = parse_config(args.config or default_config_path())
    exp = cfg.experiment
    if args.seed is not None:
        exp = replace(exp, seed=args.seed)
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs", "must be >= 1")
        exp = replace(exp, epochs=args.epochs)
    if args.no_oracle:
        exp = replace(exp, oracle=False)
    return RunConfig(cfg.model, cfg.tracker, exp)


def cmd_simulate(args) -> int:
    config = _load(args)
    m = config.model.m
    out = None
    if args.out:
        out = Path(args.out)
        try:
            fh = open(out, "w", newline="")
        except OSError as exc:
            raise PowertrackError(f"cannot write {out}: {exc.strerror}") from exc
    else:
        fh = io.StringIO()

    def progress(t: EpochTrace):
        if t.epoch % 10 == 0:
            log.info("epoch %d  |grad|=%.3g  subopt=%.3g  backtracks=%d",
                     t.epoch, t.grad_norm, t.reg_risk_subopt, t.backtracks)

    with fh:
        traces = run_experiment(config.model, config.tracker, config.experiment, progress)
        write_trace(traces, m, fh)
        if out is None:
            sys.stdout.write(fh.getvalue())
    if out is not None:
        meta = out.with_name(out.name + ".meta.json")
        meta.write_text(json.dumps(_meta(config, csv_columns(m)), indent=2) + "\n")
    bad = sum(t.unconverged for t in traces)
    if bad:
        log.warning("%d of %d epochs did not pass the exit test", bad, len(traces))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    config = _load(args)
    model, tracker, exp = config
    reg = tracker.reg
    epochs = min(exp.epochs, args.calibration)
    runner = Experiment(model, tracker, replace(exp, oracle=True, epochs=epochs,
                                                slots_per_epoch=min(exp.slots_per_epoch, 50)))
    traces = [runner.start()] + [runner.step() for _ in range(1, epochs)]
    consts = runner.constants
    d_val = d_grad = 0.0
    for t in traces[:-1]:
        dv, dg = estimate_drift(model, t.epoch, [t.mu], exp.seed)
        d_val, d_grad = max(d_val, dv), max(d_grad, dg)
    rep = check_tracking_conditions(consts.delta, reg.smoothness_const, reg.alpha, reg.v_hat,
                                    consts.v_n, d_val, d_grad)
    checks = [t.decrement_check for t in traces
              if t.decrement_check is not None and t.decrement_check.applicable]
    sandwich = np.mean([r.sandwich_ok for r in checks]) if checks else math.nan
    quad = np.mean([r.quadratic_ok for r in checks]) if checks else math.nan
    subs = np.array([t.reg_risk_subopt for t in traces[1:]])
    noiseless = reg.v_hat <= 1.0 / 144.0
    values = {
        "alpha": reg.alpha, "beta": reg.beta, "eps": reg.eps, "v_hat": reg.v_hat,
        "c": reg.smoothness_const, "delta_hat": consts.delta, "v_n_hat": consts.v_n,
        "d_k_hat": d_val, "dbar_k_hat": d_grad, "rho_hat": consts.rho,
        "kappa_hat": consts.kappa, "k_hat": consts.k_hat,
        "cond1_lhs": rep.cond1_lhs, "cond1_ok": rep.cond1_ok,
        "cond2_lhs": rep.cond2_lhs, "cond2_ok": rep.cond2_ok,
        "cond2_noiseless_ok": noiseless,
        "calibration_epochs": epochs, "quadratic_region_epochs": len(checks),
        "sandwich_pass_rate": sandwich, "quadratic_rate_pass_rate": quad,
        "subopt_within_v_hat_rate": float(np.mean(subs <= reg.v_hat)) if subs.size else math.nan,
        "first_pass_fail_rate": float(np.mean([not t.first_pass_ok for t in traces[1:]]))
        if len(traces) > 1 else math.nan,
    }
    lines = [
        f"Sufficient tracking conditions (alpha={reg.alpha:g}, beta={reg.beta:g}, "
        f"eps={reg.eps:g}, V={reg.v_hat:g})",
        f"  c = alpha + beta/eps^2 = {reg.smoothness_const:.6g}",
        f"  estimated: Delta={consts.delta:.4g}  V_N={consts.v_n:.4g}  "
        f"D_k={d_val:.4g}  Dbar_k={d_grad:.4g}",
        f"  condition 1: lhs={rep.cond1_lhs:.4g} < 0.25  -> {'ok' if rep.cond1_ok else 'VIOLATED'}",
        f"  condition 2: lhs={rep.cond2_lhs:.4g} <= V    -> {'ok' if rep.cond2_ok else 'VIOLATED'}",
    ]
    if not noiseless:
        lines.append(f"  V={reg.v_hat:g} > 1/144: condition 2 fails even without sampling noise or drift")
    lines += [
        f"Calibration run: {epochs} epochs, {len(checks)} inside the quadratic region",
        f"  decrement sandwich pass rate  {sandwich:.3f}",
        f"  quadratic-rate pass rate      {quad:.3f}",
        f"  subopt <= V rate              {values['subopt_within_v_hat_rate']:.3f}",
        "",
    ]
    lines += [f"{k}={_fmt(v)}" for k, v in values.items()]
    print("\n".join(lines))
    return EXIT_OK


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def cmd_oracle(args) -> int:
    config = _load(args)
    model, tracker, exp = config
    k = args.epoch
    if k < 0:
        raise ConfigError("--epoch", "must be >= 0")
    window = SampleWindow(tracker.m0)
    for e in range(max(0, k - tracker.m0 + 1), k + 1):
        window.push(e, sample_channel(model.schedule, e, tracker.n0, exp.seed))
    sol = oracle.solve_epoch_optimum(window, tracker.reg, model)
    y, _ = dual_core.target_policy(sol.mu[: model.m], model)
    est = oracle.expected_loss_proxy(sol.mu, model.schedule, k, model, big_n=exp.proxy_n,
                                     seed=exp.seed)
    print(f"epoch={k}")
    print(f"window_epochs={','.join(map(str, window.epochs))}")
    print(f"channel_mean={model.schedule.mean(k):.17g}")
    for i, v in enumerate(sol.mu[: model.m]):
        print(f"mu_star_{i + 1}={v:.17g}")
    print(f"mu_star_tilde={sol.mu[model.m]:.17g}")
    print(f"risk_value={sol.value:.17g}")
    print(f"grad_norm={sol.grad_norm:.3g}")
    for i in range(model.m):
        print(f"target_{i + 1}={y[i]:.10g}  expected_power_{i + 1}={est.expected_power[i]:.10g}")
    return EXIT_OK


def selftest(points: int = 200, draws: int = 2000, seed: int = 0) -> dict[str, float]:
    """Finite-difference and recovery checks; returns worst errors by name."""
    from .model import default_model
    from .risk import reg_risk_grad, reg_risk_hess

    model = default_model()
    reg = RegParams()
    rng = make_rng(seed, STREAM_DIAG, 9)
    m = model.m
    worst = {"grad_fd": 0.0, "hess_fd": 0.0, "power": 0.0, "target": 0.0}
    window = SampleWindow(1, [(0, sample_channel(model.schedule, 0, 20, seed, stream=STREAM_DIAG))])
    done = 0
    while done < points:
        mu = rng.uniform(0.05, 3.0, m + 1)
        h = rng.exponential(1.0, m)
        step = 1e-6
        base = dual_core.recover(mu, h, model)
        stable = True
        fd = np.empty(m + 1)
        for j in range(m + 1):
            e = np.zeros(m + 1)
            e[j] = step
            for s in (e, -e):
                r = dual_core.recover(mu + s, h, model)
                stable &= (np.array_equal(r.power_status, base.power_status)
                           and np.array_equal(r.target_status, base.target_status))
            fd[j] = (dual_core.dual_loss(mu + e, h, model)
                     - dual_core.dual_loss(mu - e, h, model)) / (2 * step)
        if not stable:
            continue
        g = dual_core.dual_loss_grad(mu, h, model)
        worst["grad_fd"] = max(worst["grad_fd"], float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12)))
        hess = reg_risk_hess(mu, window, reg, model)
        hfd = np.empty_like(hess)
        for j in range(m + 1):
            e = np.zeros(m + 1)
            e[j] = step
            hfd[:, j] = (reg_risk_grad(mu + e, window, reg, model)
                         - reg_risk_grad(mu - e, window, reg, model)) / (2 * step)
        worst["hess_fd"] = max(worst["hess_fd"], float(np.linalg.norm(hfd - hess) / np.linalg.norm(hess)))
        done += 1
    for _ in range(draws):
        h = float(rng.exponential(1.0))
        a, b = rng.uniform(0.01, 10.0, 2)
        p_ref = oracle.reference_power(h, a, b, model.p0)
        p, _ = dual_core.power_policy(h, a, b, model.p0)
        worst["power"] = max(worst["power"], abs(float(p) - p_ref))
        agent = int(rng.integers(m))
        mu_i = float(rng.uniform(0.001, 10.0))
        y_ref = oracle.reference_target(agent, mu_i, model)
        mu = np.ones(m + 1)
        mu[agent] = mu_i
        worst["target"] = max(worst["target"], abs(dual_core.recover_target(agent, mu, model) - y_ref))
    return worst


SELFTEST_TOL = {"grad_fd": 1e-5, "hess_fd": 1e-4, "power": 1e-6, "target": 1e-6}


def cmd_selftest(args) -> int:
    worst = selftest(seed=args.seed or 0)
    ok = True
    for name, err in worst.items():
        passed = err <= SELFTEST_TOL[name]
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:8s}  worst={err:.3g}  tol={SELFTEST_TOL[name]:g}")
    return EXIT_OK if ok else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (default: shipped reference config)")
    common.add_argument("--seed", type=int, help="override experiment.seed")
    common.add_argument("--epochs", type=int, help="override experiment.epochs")
    common.add_argument("--no-oracle", action="store_true", help="skip the per-epoch oracle solve")
    common.add_argument("--quiet", action="store_true", help="only report warnings and errors")

    parser = argparse.ArgumentParser(prog="powertrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="run an experiment and write a CSV trace")
    p.add_argument("--out", metavar="PATH", help="CSV output (default: stdout)")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("diagnose", parents=[common], help="check tracking conditions on a calibration run")
    p.add_argument("--calibration", type=int, default=20, metavar="N",
                   help="calibration epochs (default 20)")
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("oracle", parents=[common], help="solve one epoch's windowed problem")
    p.add_argument("--epoch", type=int, default=0)
    p.set_defaults(func=cmd_oracle)
    p = sub.add_parser("selftest", parents=[common], help="finite-difference and recovery checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PowertrackError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
