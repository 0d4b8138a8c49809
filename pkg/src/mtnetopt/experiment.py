"""Experiment runner: schemes, per-frame metrics and seed aggregation.

Four schemes share one channel realisation per seed, so comparisons across
schemes are paired:

``proposed_comp``
    Two-timescale tracker with compensation.
``baseline3_nocomp``
    The same tracker with compensation switched off.
``baseline1_gcsi``
    Exact per-frame joint optimum computed from CSI that is ``latency_ms``
    old. It needs global instantaneous CSI, so it is a reference, not a
    deployable scheme.
``baseline2_stat``
    Decisions from long-term CSI only. Every ``T_s_ms`` it solves a sampled
    chance-constrained problem and holds the result.

Metrics are always evaluated against the true current CSI.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import statistics
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .channel import ChannelProcess, LinkCsi
from .config import SCHEMES, RunConfig
from .errors import ConfigError, OracleError
from .network import PrimalDualPoint, RelayProblem
from .oracle import OracleConfig, OuterOracle, burn_in_count, chain_weights, solve_inner, solve_outer_weights
from .solver import TrackerState, run_frame

log = logging.getLogger(__name__)

FRAME_COLUMNS = ("t_sec", "feasible", "sum_rate", "utility", "power_sum", "e_x_inst", "e_y_inst")
RUN_METRICS = ("P_out", "throughput", "utility", "e_x", "e_y")
THREADS_ENV = "MTNETOPT_THREADS"
# feasible-sample slack when checking the scenario approximation; absorbs
# roundoff at the design sample, which sits exactly on the boundary
_QUANTILE_SLACK = 1e-12
_BISECTION_STEPS = 60


# --------------------------------------------------------------------------
# Scenario and records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """One scheme run over a list of seeds under one configuration."""

    config: RunConfig
    scheme: str
    seeds: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"experiment.schemes: unknown scheme {self.scheme!r}")
        if len(self.seeds) == 0:
            raise ConfigError("experiment.seeds: must be nonempty")

    @classmethod
    def from_config(cls, config: RunConfig, scheme: str, seeds: Sequence[int] | None = None) -> "Scenario":
        return cls(config, scheme, tuple(config.experiment.seeds if seeds is None else seeds))

    @property
    def a_H(self) -> float:
        return self.config.channel.a_H

    @property
    def N_T(self) -> int:
        return self.config.experiment.N_T

    @property
    def burn_in(self) -> int:
        return burn_in_count(self.N_T, self.config.oracle.burn_in_frac)

    def frames_for(self, ms: float) -> int:
        return int(round(ms / self.config.solver.tau_ms))


@dataclass
class MetricsRecord:
    """Per-frame columns and run-level aggregates of one (scheme, seed) run."""

    scheme: str
    seed: int
    a_H: float
    frames: dict[str, np.ndarray]
    summary: dict[str, float]
    burn_in: int
    events: dict[str, int] = field(default_factory=dict)

    @property
    def P_out(self) -> float:
        return self.summary["P_out"]


@dataclass
class ScenarioResult:
    scenario: Scenario
    records: list[MetricsRecord]
    aggregate: dict[str, dict[str, float]]


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def mac_outage(r, p, h, problem: RelayProblem, margin: float = 0.0) -> bool:
    """True when some MAC constraint is violated at the applied decision.

    With ``margin = 0`` any positive residual counts. A positive margin only
    counts residuals above that fraction of the constraint's rate demand.
    """
    demand = problem.N @ np.asarray(r, float)
    residual = demand - np.log1p(problem.B @ (problem.gains(h) * np.asarray(p, float)))
    return bool(np.any(residual > margin * demand))


def metrics_fold(frames: Mapping[str, Sequence[float]], burn_in: int = 0) -> dict[str, float]:
    """Run-level metrics from per-frame columns, skipping ``burn_in`` frames.

    Throughput counts the sum rate only on feasible frames. Utility averages
    the log-rate sum over feasible frames and is NaN when there are none.
    Error averages are NaN when the error columns are absent.
    """
    feasible = np.asarray(frames["feasible"], dtype=bool)[burn_in:]
    sum_rate = np.asarray(frames["sum_rate"], dtype=float)[burn_in:]
    utility = np.asarray(frames["utility"], dtype=float)[burn_in:]
    n = feasible.size
    if n == 0:
        return {k: math.nan for k in RUN_METRICS}
    out = {
        "P_out": float(np.mean(~feasible)),
        "throughput": float(np.mean(np.where(feasible, sum_rate, 0.0))),
        "utility": float(np.mean(utility[feasible])) if feasible.any() else math.nan,
    }
    for col, key in (("e_x_inst", "e_x"), ("e_y_inst", "e_y")):
        vals = np.asarray(frames.get(col, []), dtype=float)[burn_in:]
        out[key] = float(np.mean(vals)) if vals.size == n else math.nan
    return out


def mean_ci(values: Sequence[float], level: float = 0.95) -> dict[str, float]:
    """Sample mean with a normal-approximation confidence interval."""
    vals = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    n = vals.size
    if n == 0:
        return {"mean": math.nan, "ci_low": math.nan, "ci_high": math.nan, "half_width": math.nan, "n": 0}
    mean = float(vals.mean())
    if n == 1:
        half = 0.0
    else:
        z = statistics.NormalDist().inv_cdf(0.5 + level / 2)
        half = float(z * vals.std(ddof=1) / math.sqrt(n))
    return {"mean": mean, "ci_low": mean - half, "ci_high": mean + half, "half_width": half, "n": n}


# --------------------------------------------------------------------------
# Baseline decisions
# --------------------------------------------------------------------------


def _composite(q: np.ndarray, problem: RelayProblem) -> np.ndarray:
    # plain composite CSI whose gains reproduce ``q``
    return np.sqrt(q / problem.snr_gain)


def joint_optimum(q: np.ndarray, problem: RelayProblem, cfg: OracleConfig | None = None) -> PrimalDualPoint:
    """Exact joint (p, lam, r) optimum for known gains ``q``."""
    nu, _ = chain_weights(q[None, :], problem)
    r = solve_outer_weights(nu[0], problem, cfg)
    return solve_inner(r, _composite(q, problem), problem, cfg)


def baseline1_step(h_delayed: LinkCsi, problem: RelayProblem, cfg: OracleConfig | None = None) -> PrimalDualPoint:
    """Joint optimum for the delayed CSI.

    If the inner solve fails the rates are shrunk by bisection until the
    delayed instance becomes solvable.
    """
    q = problem.gains(h_delayed)
    nu, _ = chain_weights(q[None, :], problem)
    r = solve_outer_weights(nu[0], problem, cfg)
    h = _composite(q, problem)
    try:
        return solve_inner(r, h, problem, cfg)
    except OracleError as exc:
        log.warning("baseline 1: inner solve failed (%s); shrinking rates", exc)
    lo, hi, best = 0.0, 1.0, None
    for _ in range(_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        try:
            best = solve_inner(mid * r, h, problem, cfg)
            lo = mid
        except OracleError:
            hi = mid
    if best is None:
        raise OracleError("baseline 1: no solvable rate scaling", float("inf"))
    return best


def _scenario_gains(h_l, h_s_samples: np.ndarray, problem: RelayProblem) -> np.ndarray:
    mag = np.maximum(np.abs(h_s_samples), problem.fade_floor)
    return problem.snr_gain * np.asarray(h_l, float) ** 2 * mag**2


def required_samples(theta_out: float, M: int) -> int:
    """Number of sampled draws each constraint must satisfy."""
    return int(math.ceil((1.0 - theta_out) * M - 1e-9))


def quantile_feasible(point: PrimalDualPoint, q: np.ndarray, problem: RelayProblem, need: int) -> bool:
    """Every constraint holds on at least ``need`` of the sampled gain rows."""
    if need <= 0:
        return True
    demand = problem.N @ point.r
    residual = demand[None, :] - np.log1p((q * point.p[None, :]) @ problem.B.T)
    ok = residual <= _QUANTILE_SLACK * np.maximum(demand, 1.0)[None, :]
    return bool(np.all(ok.sum(axis=0) >= need))


def baseline2_step(
    h_l, h_s_samples: np.ndarray, problem: RelayProblem, theta_out: float, cfg: OracleConfig | None = None
) -> tuple[PrimalDualPoint, int]:
    """Scenario approximation of the outage-constrained problem.

    Each link is designed for the gain met by the ``need`` strongest of the
    sampled draws, where ``need = ceil((1 - theta_out) M)``. The joint optimum
    for those design gains is then checked constraint by constraint against
    the samples, and the rates are shrunk by bisection until every constraint
    holds on at least ``need`` draws.

    Returns the decision and the number of bisection steps taken (zero when
    no shrinking was necessary).
    """
    q = _scenario_gains(h_l, np.atleast_2d(h_s_samples), problem)
    M = q.shape[0]
    need = required_samples(theta_out, M)
    design = np.sort(q, axis=0)[M - need] if need > 0 else q.max(axis=0)
    point = joint_optimum(design, problem, cfg)
    if quantile_feasible(point, q, problem, need):
        return point, 0
    lo, hi = 0.0, 1.0
    for _ in range(_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        trial = PrimalDualPoint(point.p, point.lam, mid * point.r)
        if quantile_feasible(trial, q, problem, need):
            lo = mid
        else:
            hi = mid
    log.info("baseline 2: rates shrunk by factor %.6f to meet the sampled quantile", lo)
    return PrimalDualPoint(point.p, point.lam, lo * point.r), _BISECTION_STEPS


def violation_rates(point: PrimalDualPoint, h_l, h_s_samples: np.ndarray, problem: RelayProblem) -> np.ndarray:
    """Per-constraint fraction of draws on which the decision is infeasible.

    Uses the same roundoff slack as :func:`quantile_feasible`: the fade floor
    puts an atom in the gain distribution, and draws on it meet the design
    constraint with equality.
    """
    q = _scenario_gains(h_l, np.atleast_2d(h_s_samples), problem)
    demand = problem.N @ point.r
    residual = demand[None, :] - np.log1p((q * point.p[None, :]) @ problem.B.T)
    return np.mean(residual > _QUANTILE_SLACK * np.maximum(demand, 1.0)[None, :], axis=0)


# --------------------------------------------------------------------------
# Scheme runners
# --------------------------------------------------------------------------


class _Tracker:
    def __init__(self, cfg: RunConfig, problem: RelayProblem, outer: OuterOracle, csi0: LinkCsi,
                 compensate: bool, latency_frames: int) -> None:
        self.problem = problem
        self.schedule = cfg.schedule()
        self.clock = cfg.clock()
        self.comp = cfg.compensation(compensate)
        self.algorithm = cfg.solver.algorithm
        self.scaling = cfg.scaling(problem)
        self.delay = latency_frames
        x0 = solve_inner(outer(csi0.h_l), csi0, problem, outer.cfg)
        self.state = TrackerState.start(x0, csi0)
        self.fallbacks = 0

    def step(self, csi: LinkCsi) -> PrimalDualPoint:
        self.state, rec = run_frame(
            self.state, csi, self.problem, self.schedule, self.clock, self.comp,
            algorithm=self.algorithm, scaling=self.scaling, outer_delay=self.delay,
        )
        self.fallbacks += rec.comp_fallback
        return PrimalDualPoint(rec.p, rec.lam, rec.r)


class _Baseline1:
    def __init__(self, problem: RelayProblem, ocfg: OracleConfig, csi0: LinkCsi, latency_frames: int) -> None:
        self.problem = problem
        self.ocfg = ocfg
        self.history: deque[LinkCsi] = deque([csi0] * (latency_frames + 1), maxlen=latency_frames + 1)

    def step(self, csi: LinkCsi) -> PrimalDualPoint:
        self.history.append(csi)
        return baseline1_step(self.history[0], self.problem, self.ocfg)


class _Baseline2:
    def __init__(self, problem: RelayProblem, ocfg: OracleConfig, seed: int, hold_frames: int,
                 theta_out: float, M: int) -> None:
        self.problem = problem
        self.ocfg = ocfg
        self.hold = hold_frames
        self.theta = theta_out
        self.M = M
        # sampling stream independent of the channel streams of the same seed
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.count = 0
        self.current: PrimalDualPoint | None = None
        self.shrinks = 0

    def step(self, csi: LinkCsi) -> PrimalDualPoint:
        if self.count % self.hold == 0:
            shape = (self.M, self.problem.n_links)
            samples = (self.rng.standard_normal(shape) + 1j * self.rng.standard_normal(shape)) / math.sqrt(2)
            self.current, steps = baseline2_step(csi.h_l, samples, self.problem, self.theta, self.ocfg)
            self.shrinks += steps > 0
        self.count += 1
        return self.current


# --------------------------------------------------------------------------
# Single run
# --------------------------------------------------------------------------


def outer_oracle_for(cfg: RunConfig, problem: RelayProblem, csi0: LinkCsi) -> OuterOracle:
    """Reference y*(h_l) for a run starting at ``csi0``.

    Without fading dynamics (a_H = 0) the fading stays at its initial draw,
    so the expectation over fading collapses onto that single sample.
    """
    ocfg = cfg.oracle_config()
    if cfg.channel.a_H == 0:
        return OuterOracle(problem, ocfg, h_s_samples=csi0.h_s[None, :])
    return OuterOracle(problem, ocfg)


def simulate(scenario: Scenario, seed: int) -> MetricsRecord:
    """Run one scheme for one seed and fold its metrics."""
    cfg = scenario.config
    topo = cfg.load_topology()
    problem = cfg.problem(topo)
    ocfg = cfg.oracle_config()
    exp = cfg.experiment
    channel = ChannelProcess.start(topo, cfg.channel.params(), seed)
    tau = cfg.clock().tau
    csi = channel.csi()
    outer = outer_oracle_for(cfg, problem, csi)
    latency = scenario.frames_for(exp.latency_ms)
    if scenario.scheme in ("proposed_comp", "baseline3_nocomp"):
        runner: Any = _Tracker(cfg, problem, outer, csi, scenario.scheme == "proposed_comp", latency)
    elif scenario.scheme == "baseline1_gcsi":
        runner = _Baseline1(problem, ocfg, csi, latency)
    else:
        runner = _Baseline2(problem, ocfg, seed, scenario.frames_for(exp.T_s_ms), exp.theta_out,
                            exp.scenario_samples)

    n = scenario.N_T
    cols = {name: np.zeros(n) for name in FRAME_COLUMNS}
    for k in range(n):
        csi = channel.advance(tau)
        x = runner.step(csi)
        cols["t_sec"][k] = (k + 1) * tau
        cols["feasible"][k] = not mac_outage(x.r, x.p, csi, problem, exp.outage_margin)
        cols["sum_rate"][k] = x.r.sum()
        cols["utility"][k] = np.sum(np.log(x.r))
        cols["power_sum"][k] = x.p.sum()
        if exp.track_errors:
            target = solve_inner(x.r, csi, problem, ocfg)
            dx = np.concatenate([x.p - target.p, x.lam - target.lam])
            dy = x.r - outer(csi.h_l)
            cols["e_x_inst"][k] = dx @ dx
            cols["e_y_inst"][k] = dy @ dy
        else:
            cols["e_x_inst"][k] = cols["e_y_inst"][k] = math.nan
    events = {
        "comp_fallbacks": int(getattr(runner, "fallbacks", 0)),
        "baseline2_shrinks": int(getattr(runner, "shrinks", 0)),
    }
    summary = metrics_fold(cols, scenario.burn_in)
    return MetricsRecord(scenario.scheme, seed, scenario.a_H, cols, summary, scenario.burn_in, events)


# --------------------------------------------------------------------------
# Seeds and grids
# --------------------------------------------------------------------------


def worker_count(n_tasks: int) -> int:
    """Parallel workers, capped by ``MTNETOPT_THREADS`` and the CPU count."""
    cap = os.environ.get(THREADS_ENV)
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = min(limit, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {cap!r}") from exc
    return max(1, min(limit, n_tasks))


def _simulate_task(args: tuple[Scenario, int]) -> MetricsRecord:
    return simulate(*args)


def run_many(tasks: Sequence[tuple[Scenario, int]], workers: int | None = None) -> list[MetricsRecord]:
    """Simulate (scenario, seed) pairs, in parallel when allowed.

    Results come back in task order, so the output does not depend on the
    worker count.
    """
    workers = worker_count(len(tasks)) if workers is None else workers
    if workers <= 1:
        return [simulate(sc, seed) for sc, seed in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_simulate_task, tasks))


def aggregate(records: Sequence[MetricsRecord]) -> dict[str, dict[str, float]]:
    return {key: mean_ci([r.summary[key] for r in records]) for key in RUN_METRICS}


def run_scenario(scenario: Scenario, workers: int | None = None) -> ScenarioResult:
    """All seeds of one scenario with mean and 95% CI per metric."""
    records = run_many([(scenario, s) for s in scenario.seeds], workers)
    return ScenarioResult(scenario, records, aggregate(records))


def apply_override(cfg: RunConfig, key: str, value: str) -> RunConfig:
    """Set ``key`` (``section.key`` or a key unique across sections) from text."""
    from .config import SECTIONS, config_from_mapping

    if "." in key:
        section, name = key.split(".", 1)
    else:
        owners = [s for s, cls in SECTIONS.items() if name_in(cls, key)]
        if len(owners) != 1:
            raise ConfigError(f"{key}: unknown or ambiguous grid key")
        section, name = owners[0], key
    doc = {s: _section_text(getattr(cfg, s)) for s in SECTIONS}
    if section not in doc or name not in doc[section]:
        raise ConfigError(f"{key}: unknown grid key")
    doc[section][name] = value
    return config_from_mapping(doc, cfg.base_dir)


def name_in(cls: type, key: str) -> bool:
    return key in cls.__dataclass_fields__


def _section_text(section: Any) -> dict[str, str]:
    out = {}
    for name in section.__dataclass_fields__:
        v = getattr(section, name)
        if isinstance(v, tuple):
            out[name] = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            out[name] = "on" if v else "off"
        elif v is None:
            out[name] = "none"
        elif isinstance(v, float):
            out[name] = repr(v)
        else:
            out[name] = str(v)
    return out


def parse_grid(text: str) -> tuple[str, list[str]]:
    """``"a_H=1,10,50"`` -> ``("a_H", ["1", "10", "50"])``."""
    if "=" not in text:
        raise ConfigError(f"--grid: expected key=v1,v2,... got {text!r}")
    key, values = text.split("=", 1)
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise ConfigError(f"--grid: no values for {key!r}")
    return key.strip(), vals


def run_grid(
    cfg: RunConfig,
    schemes: Sequence[str] | None = None,
    seeds: Sequence[int] | None = None,
    grid: tuple[str, Sequence[str]] | None = None,
    workers: int | None = None,
) -> list[ScenarioResult]:
    """Every scheme at every grid value, all (scheme, value, seed) runs pooled."""
    schemes = tuple(schemes or cfg.experiment.schemes)
    configs = [cfg] if grid is None else [apply_override(cfg, grid[0], v) for v in grid[1]]
    scenarios = [Scenario.from_config(c, s, seeds) for c in configs for s in schemes]
    tasks = [(sc, seed) for sc in scenarios for seed in sc.seeds]
    records = run_many(tasks, workers)
    results, pos = [], 0
    for sc in scenarios:
        chunk = records[pos: pos + len(sc.seeds)]
        pos += len(sc.seeds)
        results.append(ScenarioResult(sc, chunk, aggregate(chunk)))
    return results


# --------------------------------------------------------------------------
# Stability report
# --------------------------------------------------------------------------


def stability_report(cfg: RunConfig, seed: int | None = None) -> dict[str, Any]:
    """Estimate stability parameters along one tracker run and evaluate the bound.

    The proposed scheme is run for ``N_T`` frames. ``analysis_frames``
    iterates, evenly spaced after the burn-in, supply the parameter
    estimates; the same run supplies the measured tracking errors.
    """
    from .analysis import error_bound, estimate_params, stability_condition
    from .errors import StabilityError

    seed = cfg.experiment.seeds[0] if seed is None else seed
    scenario = Scenario.from_config(cfg, "proposed_comp", [seed])
    topo = cfg.load_topology()
    problem = cfg.problem(topo)
    ocfg = cfg.oracle_config()
    params_ch = cfg.channel.params()
    channel = ChannelProcess.start(topo, params_ch, seed)
    outer = outer_oracle_for(cfg, problem, channel.csi())
    clock = cfg.clock()
    runner = _Tracker(cfg, problem, outer, channel.csi(), True, scenario.frames_for(cfg.experiment.latency_ms))
    states, ex, ey = [], [], []
    for _ in range(scenario.N_T):
        csi = channel.advance(clock.tau)
        x = runner.step(csi)
        states.append((x, csi))
        target = solve_inner(x.r, csi, problem, ocfg)
        dx = np.concatenate([x.p - target.p, x.lam - target.lam])
        dy = x.r - outer(csi.h_l)
        ex.append(dx @ dx)
        ey.append(dy @ dy)
    after = states[scenario.burn_in:]
    picks = np.unique(np.linspace(0, len(after) - 1, cfg.experiment.analysis_frames).astype(int))
    params = estimate_params(
        problem, [after[i] for i in picks], clock.N_s, cfg.experiment.analysis_rate, ocfg, outer,
        cfg.compensation(True),
    )
    if cfg.channel.a_H == 0:
        # frozen fading: the rate-gradient estimator has no fading noise
        params = dataclasses.replace(params, sigma_bar=0.0)
    a_H, gamma = cfg.channel.a_H, cfg.solver.gamma
    verdict = stability_condition(params, a_H, clock.tau, clock.N_s, gamma)
    measured = {
        "e_x": float(np.mean(ex[scenario.burn_in:])),
        "e_y": float(np.mean(ey[scenario.burn_in:])),
    }
    report: dict[str, Any] = {
        "seed": seed,
        "params": params.as_dict(),
        "epsilon": params_ch.epsilon,
        "margin": verdict.margin,
        "margin_literal": verdict.margin_literal,
        "stable": verdict.stable,
        "measured": measured,
    }
    try:
        bound = error_bound(params, a_H, params_ch.epsilon, clock.tau, clock.N_s, gamma)
    except StabilityError as exc:
        report.update(rho=None, eta=None, C=None, bound=None, bound_note=str(exc))
    else:
        report.update(rho=bound.rho, eta=bound.eta, C=bound.C, C_b=bound.C_b, bound=bound.bound,
                      bound_holds=measured["e_x"] + measured["e_y"] <= bound.bound)
    return report
