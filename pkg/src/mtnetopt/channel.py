"""Exogenous channel processes: complex OU fading, Levy-walk mobility, path loss.

Short-term fading is an Ornstein-Uhlenbeck process advanced with its exact
Gaussian transition kernel. Long-term path loss follows node positions, which
move according to a truncated Levy walk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .network import Topology


@dataclass(frozen=True)
class OuFading:
    """Per-link complex fading coefficients and their mean-reversion rate.

    Real and imaginary parts are independent OU components with stationary
    variance 1/2, so the stationary magnitude is Rayleigh with E|h|^2 = 1.
    """

    h_s: np.ndarray
    a_H: float

    def __post_init__(self) -> None:
        if self.a_H < 0:
            raise ValueError(f"a_H must be >= 0, got {self.a_H}")
        object.__setattr__(self, "h_s", np.asarray(self.h_s, dtype=complex))


def standard_complex_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Draw circularly-symmetric complex Gaussians with E|z|^2 = 1."""
    z = rng.standard_normal(np.append(size, 2))
    return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(0.5)


def stationary_fading(n_links: int, a_H: float, rng: np.random.Generator) -> OuFading:
    """Sample an initial fading state from the stationary law."""
    return OuFading(standard_complex_normal(rng, n_links), a_H)


def ou_step(state: OuFading, dt: float, rng: np.random.Generator) -> OuFading:
    """Advance the fading process by ``dt`` seconds with the exact kernel.

    h' = h exp(-a_H dt / 2) + sqrt(1 - exp(-a_H dt)) xi, with xi standard
    complex Gaussian. ``dt = 0`` returns the state unchanged without drawing.
    """
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if dt == 0:
        return OuFading(state.h_s.copy(), state.a_H)
    decay = np.exp(-0.5 * state.a_H * dt)
    scale = np.sqrt(-np.expm1(-state.a_H * dt))
    xi = standard_complex_normal(rng, state.h_s.shape)
    return OuFading(state.h_s * decay + scale * xi, state.a_H)


# --------------------------------------------------------------------------
# Mobility
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LevyParams:
    """Truncated power-law parameters of the Levy walk.

    Flight lengths and pause times have densities proportional to
    ``l ** (-1 - beta)`` on ``[l_min, l_max]``.
    """

    v_max: float
    region_radius: float = 100.0
    beta_flight: float = 1.0
    beta_pause: float = 1.0
    flight_min: float = 1.0
    flight_max: float | None = None
    pause_min: float = 1.0
    pause_max: float = 100.0

    def __post_init__(self) -> None:
        if self.v_max < 0:
            raise ValueError("v_max must be >= 0")
        if self.region_radius <= 0:
            raise ValueError("region_radius must be > 0")
        if self.beta_flight < 0 or self.beta_pause < 0:
            raise ValueError("Levy exponents must be >= 0")
        if not 0 < self.flight_min <= self.max_flight:
            raise ValueError("need 0 < flight_min <= flight_max")
        if not 0 < self.pause_min <= self.pause_max:
            raise ValueError("need 0 < pause_min <= pause_max")

    @property
    def max_flight(self) -> float:
        return self.region_radius if self.flight_max is None else self.flight_max


def truncated_pareto(
    rng: np.random.Generator, beta: float, lo: float, hi: float, size=None
) -> np.ndarray | float:
    """Inverse-CDF draw from density proportional to l^(-1-beta) on [lo, hi]."""
    u = rng.random(size)
    if lo == hi:
        return lo + 0.0 * u
    if beta == 0:
        return lo * (hi / lo) ** u
    a, b = lo ** (-beta), hi ** (-beta)
    return (a - u * (a - b)) ** (-1.0 / beta)


@dataclass
class MobilityState:
    """Positions and walk phases of all nodes.

    Arrays are indexed by node slot (see ``node_ids``). Static nodes have
    ``mobile == False`` and never move.
    """

    node_ids: tuple[int, ...]
    position: np.ndarray
    home: np.ndarray
    mobile: np.ndarray
    walking: np.ndarray
    destination: np.ndarray
    speed: np.ndarray
    pause_remaining: np.ndarray
    params: LevyParams

    def copy(self) -> "MobilityState":
        return replace(
            self,
            position=self.position.copy(),
            home=self.home.copy(),
            mobile=self.mobile.copy(),
            walking=self.walking.copy(),
            destination=self.destination.copy(),
            speed=self.speed.copy(),
            pause_remaining=self.pause_remaining.copy(),
        )

    def position_of(self, node_id: int) -> np.ndarray:
        return self.position[self.node_ids.index(node_id)]

    @classmethod
    def from_positions(
        cls,
        node_ids: Sequence[int],
        positions: np.ndarray,
        mobile: Sequence[bool],
        params: LevyParams,
    ) -> "MobilityState":
        """Start every mobile node paused with zero pause left at its home."""
        pos = np.array(positions, dtype=float).reshape(len(node_ids), 2)
        n = len(node_ids)
        return cls(
            node_ids=tuple(int(i) for i in node_ids),
            position=pos.copy(),
            home=pos.copy(),
            mobile=np.array(mobile, dtype=bool),
            walking=np.zeros(n, dtype=bool),
            destination=pos.copy(),
            speed=np.zeros(n),
            pause_remaining=np.zeros(n),
            params=params,
        )


def _clip_to_disk(point: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    offset = point - center
    dist = float(np.hypot(offset[0], offset[1]))
    if dist <= radius:
        return point
    return center + offset * (radius / dist)


def mobility_step(
    state: MobilityState, dt: float, rng: np.random.Generator
) -> MobilityState:
    """Advance all mobile nodes by ``dt`` seconds.

    Phase changes inside the step are handled by sub-stepping, so a node may
    arrive, pause and depart again within one call.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    out = state.copy()
    prm = state.params
    if prm.v_max == 0:
        return out
    for i in np.flatnonzero(out.mobile):
        remaining = dt
        while remaining > 0:
            if not out.walking[i]:
                if out.pause_remaining[i] > remaining:
                    out.pause_remaining[i] -= remaining
                    remaining = 0.0
                    break
                remaining -= out.pause_remaining[i]
                out.pause_remaining[i] = 0.0
                length = truncated_pareto(
                    rng, prm.beta_flight, prm.flight_min, prm.max_flight
                )
                angle = rng.uniform(0.0, 2.0 * np.pi)
                target = out.position[i] + length * np.array([np.cos(angle), np.sin(angle)])
                out.destination[i] = _clip_to_disk(target, out.home[i], prm.region_radius)
                # 1 - U with U in [0, 1) lands in (0, 1]
                out.speed[i] = prm.v_max * (1.0 - rng.random())
                out.walking[i] = True
                continue
            gap = out.destination[i] - out.position[i]
            dist = float(np.hypot(gap[0], gap[1]))
            travel = out.speed[i] * remaining
            if travel < dist:
                out.position[i] = out.position[i] + gap * (travel / dist)
                remaining = 0.0
            else:
                out.position[i] = out.destination[i].copy()
                remaining -= dist / out.speed[i]
                out.walking[i] = False
                out.pause_remaining[i] = truncated_pareto(
                    rng, prm.beta_pause, prm.pause_min, prm.pause_max
                )
    return out


# --------------------------------------------------------------------------
# Path loss and composite CSI
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PathLoss:
    h_l: np.ndarray
    c0: float
    iota: float
    D_min: float


def path_loss_value(distance, c0: float, iota: float, D_min: float) -> np.ndarray:
    """c0 * max(D, D_min)^(-iota), elementwise."""
    return c0 * np.maximum(np.asarray(distance, dtype=float), D_min) ** (-iota)


def link_distances(mob: MobilityState, topo: "Topology") -> np.ndarray:
    index = {nid: k for k, nid in enumerate(mob.node_ids)}
    tx = np.array([index[link.tx] for link in topo.links])
    rx = np.array([index[link.rx] for link in topo.links])
    gap = mob.position[tx] - mob.position[rx]
    return np.hypot(gap[:, 0], gap[:, 1])


def path_loss_from_positions(
    mob: MobilityState, topo: "Topology", c0: float, iota: float, D_min: float
) -> PathLoss:
    """Path loss of every link from current endpoint positions."""
    h_l = path_loss_value(link_distances(mob, topo), c0, iota, D_min)
    return PathLoss(h_l, c0, iota, D_min)


def epsilon_bound(c0: float, iota: float, D_min: float, v_max: float) -> float:
    """Largest possible |dh_l/dt| given the relative speed bound."""
    return 2.0 * c0 * iota * D_min ** (-iota - 1.0) * v_max


def v_max_for_epsilon(epsilon: float, c0: float, iota: float, D_min: float) -> float:
    """Invert :func:`epsilon_bound` for the speed."""
    return epsilon / (2.0 * c0 * iota * D_min ** (-iota - 1.0))


def composite_csi(fading: OuFading, pl: PathLoss) -> np.ndarray:
    """Per-link complex CSI h = h_l * h_s."""
    if fading.h_s.shape != pl.h_l.shape:
        raise ValueError(
            f"length mismatch: {fading.h_s.shape[0]} fading vs {pl.h_l.shape[0]} path-loss"
        )
    return pl.h_l * fading.h_s


@dataclass(frozen=True)
class LinkCsi:
    """Fading and path loss kept separate so sensitivities can target either."""

    h_s: np.ndarray
    h_l: np.ndarray

    def __post_init__(self) -> None:
        hs = np.asarray(self.h_s)
        hl = np.asarray(self.h_l, dtype=float)
        if hs.shape != hl.shape:
            raise ValueError("h_s and h_l must have equal shapes")
        object.__setattr__(self, "h_s", hs)
        object.__setattr__(self, "h_l", hl)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.h_s)

    def with_magnitude(self, mag: np.ndarray) -> "LinkCsi":
        """Same phases, new fading magnitudes."""
        hs = np.asarray(self.h_s)
        phase = np.where(np.abs(hs) > 0, hs / np.where(hs == 0, 1, np.abs(hs)), 1.0)
        return LinkCsi(np.asarray(mag) * phase, self.h_l)

    def with_path_loss(self, h_l: np.ndarray) -> "LinkCsi":
        return LinkCsi(self.h_s, np.asarray(h_l, dtype=float))


# --------------------------------------------------------------------------
# Joint channel process
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelParams:
    a_H: float = 10.0
    v_max: float = 0.0
    D_min: float = 75.0
    iota: float = 1.8
    c0: float | None = None
    beta_flight: float = 1.0
    beta_pause: float = 1.0
    region_radius: float = 100.0

    @property
    def c0_value(self) -> float:
        return self.D_min**self.iota if self.c0 is None else self.c0

    @property
    def epsilon(self) -> float:
        return epsilon_bound(self.c0_value, self.iota, self.D_min, self.v_max)

    def levy(self) -> LevyParams:
        return LevyParams(
            v_max=self.v_max,
            region_radius=self.region_radius,
            beta_flight=self.beta_flight,
            beta_pause=self.beta_pause,
        )


@dataclass
class ChannelProcess:
    """Fading, mobility and path loss advanced together on a common clock.

    Fading and mobility use independent child streams of one seed, so a
    trajectory is reproducible and the two processes do not share draws.
    """

    topo: "Topology"
    params: ChannelParams
    fading: OuFading
    mobility: MobilityState
    fading_rng: np.random.Generator
    mobility_rng: np.random.Generator
    t: float = 0.0
    path_loss: PathLoss = field(init=False)

    def __post_init__(self) -> None:
        self._refresh_path_loss()

    @classmethod
    def start(cls, topo: "Topology", params: ChannelParams, seed: int) -> "ChannelProcess":
        fading_ss, mobility_ss = np.random.SeedSequence(seed).spawn(2)
        fading_rng = np.random.default_rng(fading_ss)
        mobility_rng = np.random.default_rng(mobility_ss)
        fading = stationary_fading(topo.n_links, params.a_H, fading_rng)
        ids, pos, mobile = topo.initial_layout()
        mob = MobilityState.from_positions(ids, pos, mobile, params.levy())
        return cls(topo, params, fading, mob, fading_rng, mobility_rng)

    def _refresh_path_loss(self) -> None:
        p = self.params
        self.path_loss = path_loss_from_positions(
            self.mobility, self.topo, p.c0_value, p.iota, p.D_min
        )

    def csi(self) -> LinkCsi:
        return LinkCsi(self.fading.h_s.copy(), self.path_loss.h_l.copy())

    def advance(self, dt: float) -> LinkCsi:
        self.fading = ou_step(self.fading, dt, self.fading_rng)
        if dt > 0 and self.params.v_max > 0:
            self.mobility = mobility_step(self.mobility, dt, self.mobility_rng)
            self._refresh_path_loss()
        self.t += dt
        return self.csi()


def write_trajectory_csv(
    path: str | Path, times: Iterable[float], csis: Iterable[LinkCsi], link_ids: Sequence[int]
) -> None:
    """Dump a CSI trajectory with columns t_sec, link_id, re_hs, im_hs, h_l."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_sec", "link_id", "re_hs", "im_hs", "h_l"])
        for t, csi in zip(times, csis):
            for k, lid in enumerate(link_ids):
                hs = complex(csi.h_s[k])
                writer.writerow(
                    [repr(float(t)), lid, repr(hs.real), repr(hs.imag), repr(float(csi.h_l[k]))]
                )
