"""Scenario configuration files.

The format is INI with exactly five sections::

    [channel]  [topology]  [solver]  [oracle]  [experiment]

Every key is optional and falls back to the default below. Unknown sections
or keys raise :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .channel import ChannelParams, v_max_for_epsilon
from .errors import ConfigError
from .network import RelayProblem, Topology, default_topology, load_topology, single_link_topology
from .oracle import OracleConfig
from .solver import ALGORITHMS, CompensationConfig, FrameClock, Scaling, StepSchedule

SCHEMES = ("proposed_comp", "baseline1_gcsi", "baseline2_stat", "baseline3_nocomp")
RATE_DEFINITIONS = ("active", "symmetric")


@dataclass(frozen=True)
class ChannelSection:
    a_H: float = 10.0
    epsilon_target: float | None = None
    v_max_mps: float | None = None
    D_min_m: float = 75.0
    iota: float = 1.8
    c0_mode: str = "dmin_pow_iota"
    c0: float | None = None
    levy_beta_flight: float = 1.0
    levy_beta_pause: float = 1.0
    region_radius_m: float = 100.0
    snr_db: float = 11.0
    fade_floor: float = 0.5

    def c0_value(self) -> float:
        return self.D_min_m**self.iota if self.c0_mode == "dmin_pow_iota" else float(self.c0)

    def v_max(self) -> float:
        if self.v_max_mps is not None:
            return self.v_max_mps
        if self.epsilon_target is not None:
            return v_max_for_epsilon(self.epsilon_target, self.c0_value(), self.iota, self.D_min_m)
        return 0.0

    def params(self) -> ChannelParams:
        return ChannelParams(
            a_H=self.a_H,
            v_max=self.v_max(),
            D_min=self.D_min_m,
            iota=self.iota,
            c0=None if self.c0_mode == "dmin_pow_iota" else self.c0,
            beta_flight=self.levy_beta_flight,
            beta_pause=self.levy_beta_pause,
            region_radius=self.region_radius_m,
        )


@dataclass(frozen=True)
class TopologySection:
    # "bundled", "single_link" or a JSON path (relative paths resolve
    # against the config file's directory)
    file: str = "bundled"
    V: float = 1.0


@dataclass(frozen=True)
class SolverSection:
    algorithm: str = "primal_dual"
    gamma: float = 0.1
    mu_schedule: str = "constant"
    mu0: float = 0.01
    # one_over_n only: mu_n = mu0 / (n + mu_offset)
    mu_offset: float = 200.0
    N_s: int = 30
    tau_ms: float = 1.0
    compensation: bool = True
    tikhonov_delta: float = 1e-8
    active_set_tol: float = 1e-6
    max_step_ratio: float = 1.0
    scaling: str = "identity"


@dataclass(frozen=True)
class OracleSection:
    oracle_inner_tol: float = 1e-10
    oracle_outer_samples: int = 4096
    oracle_cache_tol: float = 1e-4
    oracle_seed: int = 12345
    burn_in_frac: float = 0.1


@dataclass(frozen=True)
class ExperimentSection:
    schemes: tuple[str, ...] = ("proposed_comp", "baseline3_nocomp")
    seeds: tuple[int, ...] = tuple(range(20))
    N_T: int = 600
    latency_ms: float = 0.0
    T_s_ms: float = 100.0
    theta_out: float = 0.05
    scenario_samples: int = 2048
    outage_margin: float = 0.05
    track_errors: bool = True
    analysis_rate: str = "active"
    analysis_frames: int = 20


@dataclass(frozen=True)
class RunConfig:
    channel: ChannelSection = field(default_factory=ChannelSection)
    topology: TopologySection = field(default_factory=TopologySection)
    solver: SolverSection = field(default_factory=SolverSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    base_dir: str = "."

    def __post_init__(self) -> None:
        validate(self)

    # ---- builders -------------------------------------------------------

    def load_topology(self) -> Topology:
        name = self.topology.file
        if name == "bundled":
            return default_topology()
        if name == "single_link":
            return single_link_topology(self.channel.D_min_m)
        path = Path(name)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        try:
            return load_topology(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"topology.file: cannot load {path}: {exc}") from exc

    def problem(self, topo: Topology | None = None) -> RelayProblem:
        return RelayProblem(
            topo or self.load_topology(),
            V=self.topology.V,
            snr_gain=10.0 ** (self.channel.snr_db / 10.0),
            fade_floor=self.channel.fade_floor,
        )

    def schedule(self) -> StepSchedule:
        kind = "constant" if self.solver.mu_schedule == "constant" else "diminishing"
        return StepSchedule(kind, self.solver.gamma, self.solver.mu0, self.solver.mu_offset)

    def clock(self) -> FrameClock:
        return FrameClock(self.solver.tau_ms * 1e-3, self.solver.N_s)

    def compensation(self, enabled: bool | None = None) -> CompensationConfig:
        s = self.solver
        return CompensationConfig(
            enabled=s.compensation if enabled is None else enabled,
            tikhonov_delta=s.tikhonov_delta,
            active_set_tol=s.active_set_tol,
            max_step_ratio=s.max_step_ratio,
        )

    def oracle_config(self) -> OracleConfig:
        o = self.oracle
        return OracleConfig(
            inner_tol=o.oracle_inner_tol,
            outer_samples=o.oracle_outer_samples,
            cache_tol=o.oracle_cache_tol,
            burn_in_frac=o.burn_in_frac,
            seed=o.oracle_seed,
        )

    def scaling(self, problem: RelayProblem) -> Scaling | None:
        mode = self.solver.scaling
        if mode == "identity":
            return None
        path = Path(mode[len("diag:"):])
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        try:
            values = np.loadtxt(path, ndmin=1)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"solver.scaling: cannot read {path}: {exc}") from exc
        need = problem.n_x + problem.n_flows
        if values.shape != (need,) or not np.all(values > 0):
            raise ConfigError(f"solver.scaling: {path} must hold {need} positive numbers")
        return Scaling(values[: problem.n_x], values[problem.n_x:])

    def with_overrides(self, section: str, **values: Any) -> "RunConfig":
        current = getattr(self, section)
        return dataclasses.replace(self, **{section: dataclasses.replace(current, **values)})

    def as_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out


SECTIONS: dict[str, type] = {
    "channel": ChannelSection,
    "topology": TopologySection,
    "solver": SolverSection,
    "oracle": OracleSection,
    "experiment": ExperimentSection,
}


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: RunConfig) -> None:
    c, t, s, o, e = cfg.channel, cfg.topology, cfg.solver, cfg.oracle, cfg.experiment
    _require(c.a_H >= 0, "channel.a_H", "must be >= 0")
    _require(
        c.epsilon_target is None or c.v_max_mps is None,
        "channel.epsilon_target",
        "set either epsilon_target or v_max_mps, not both",
    )
    _require(c.epsilon_target is None or c.epsilon_target >= 0, "channel.epsilon_target", "must be >= 0")
    _require(c.v_max_mps is None or c.v_max_mps >= 0, "channel.v_max_mps", "must be >= 0")
    _require(c.D_min_m > 0, "channel.D_min_m", "must be > 0")
    _require(c.iota > 0, "channel.iota", "must be > 0")
    _require(c.c0_mode in ("dmin_pow_iota", "explicit"), "channel.c0_mode", "dmin_pow_iota or explicit")
    _require(
        c.c0_mode == "dmin_pow_iota" or (c.c0 is not None and c.c0 > 0),
        "channel.c0",
        "explicit c0_mode needs c0 > 0",
    )
    _require(0 < c.levy_beta_flight <= 2, "channel.levy_beta_flight", "must lie in (0, 2]")
    _require(0 < c.levy_beta_pause <= 2, "channel.levy_beta_pause", "must lie in (0, 2]")
    _require(c.region_radius_m > 0, "channel.region_radius_m", "must be > 0")
    _require(np.isfinite(c.snr_db), "channel.snr_db", "must be finite")
    _require(c.fade_floor >= 0, "channel.fade_floor", "must be >= 0")
    _require(t.V > 0, "topology.V", "must be > 0")
    _require(s.algorithm in ALGORITHMS, "solver.algorithm", f"one of {ALGORITHMS}")
    _require(s.gamma > 0, "solver.gamma", "must be > 0")
    _require(s.mu_schedule in ("constant", "one_over_n"), "solver.mu_schedule", "constant or one_over_n")
    _require(s.mu0 > 0, "solver.mu0", "must be > 0")
    _require(s.mu_offset >= 0, "solver.mu_offset", "must be >= 0")
    _require(s.N_s >= 1, "solver.N_s", "must be >= 1")
    _require(s.tau_ms > 0, "solver.tau_ms", "must be > 0")
    _require(s.tikhonov_delta >= 0, "solver.tikhonov_delta", "must be >= 0")
    _require(s.active_set_tol >= 0, "solver.active_set_tol", "must be >= 0")
    _require(s.max_step_ratio > 0, "solver.max_step_ratio", "must be > 0")
    _require(
        s.scaling == "identity" or (s.scaling.startswith("diag:") and len(s.scaling) > 5),
        "solver.scaling",
        "identity or diag:<file>",
    )
    _require(o.oracle_inner_tol > 0, "oracle.oracle_inner_tol", "must be > 0")
    _require(o.oracle_outer_samples >= 1, "oracle.oracle_outer_samples", "must be >= 1")
    _require(o.oracle_cache_tol >= 0, "oracle.oracle_cache_tol", "must be >= 0")
    _require(0 <= o.burn_in_frac < 1, "oracle.burn_in_frac", "must lie in [0, 1)")
    _require(len(e.schemes) > 0, "experiment.schemes", "must be nonempty")
    for name in e.schemes:
        _require(name in SCHEMES, "experiment.schemes", f"unknown scheme {name!r}; choose from {SCHEMES}")
    _require(len(e.seeds) > 0, "experiment.seeds", "must be nonempty")
    _require(all(sd >= 0 for sd in e.seeds), "experiment.seeds", "must be >= 0")
    _require(
        e.N_T > int(np.floor(o.burn_in_frac * e.N_T)),
        "experiment.N_T",
        "horizon must exceed the burn-in",
    )
    _require(e.latency_ms >= 0, "experiment.latency_ms", "must be >= 0")
    _require(_is_multiple(e.latency_ms, s.tau_ms), "experiment.latency_ms", "must be a multiple of tau_ms")
    _require(e.T_s_ms > 0, "experiment.T_s_ms", "must be > 0")
    _require(_is_multiple(e.T_s_ms, s.tau_ms), "experiment.T_s_ms", "must be a multiple of tau_ms")
    _require(0 <= e.theta_out <= 1, "experiment.theta_out", "must lie in [0, 1]")
    _require(e.scenario_samples >= 1, "experiment.scenario_samples", "must be >= 1")
    _require(e.outage_margin >= 0, "experiment.outage_margin", "must be >= 0")
    _require(e.analysis_rate in RATE_DEFINITIONS, "experiment.analysis_rate", f"one of {RATE_DEFINITIONS}")
    _require(e.analysis_frames >= 1, "experiment.analysis_frames", "must be >= 1")


def _is_multiple(value: float, unit: float) -> bool:
    k = round(value / unit)
    return abs(value - k * unit) <= 1e-9 * max(1.0, value)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_BOOL = {"on": True, "true": True, "yes": True, "1": True, "off": False, "false": False, "no": False, "0": False}


def _parse_value(key: str, raw: str, kind: Any) -> Any:
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOL:
                raise ValueError("expected on/off")
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "float|None":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "tuple[str]":
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        if kind == "tuple[int]":
            return parse_int_list(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from exc


def parse_int_list(raw: str) -> tuple[int, ...]:
    """Parse ``"0,1,2"`` or a range ``"0-19"`` (inclusive) into seeds."""
    out: list[int] = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _field_kind(annotation: str) -> Any:
    return {
        "float": float,
        "int": int,
        "bool": bool,
        "str": str,
        "float | None": "float|None",
        "tuple[str, ...]": "tuple[str]",
        "tuple[int, ...]": "tuple[int]",
    }[annotation]


def config_from_mapping(doc: Mapping[str, Mapping[str, str]], base_dir: str | Path = ".") -> RunConfig:
    """Build a config from ``{section: {key: text}}``."""
    sections = {}
    for name, values in doc.items():
        if name not in SECTIONS:
            raise ConfigError(f"[{name}]: unknown section; expected one of {tuple(SECTIONS)}")
        cls = SECTIONS[name]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"{name}.{key}: unknown key")
            kwargs[key] = _parse_value(f"{name}.{key}", str(raw), _field_kind(fields[key].type))
        sections[name] = cls(**kwargs)
    return RunConfig(**sections, base_dir=str(base_dir))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case sensitive (a_H, N_s)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    doc = {name: dict(parser.items(name)) for name in parser.sections()}
    return config_from_mapping(doc, path.parent)
