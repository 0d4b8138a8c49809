"""Relay-network problem instance: topology, MAC capacity region, Lagrangian.

Decision variables are link powers ``p``, one multiplier per MAC constraint
``lam`` and per-flow rates ``r``. Flow balance is built in by routing: a
link's rate is the sum of the rates of the flows that traverse it.

Channel arguments named ``h`` may be a :class:`~mtnetopt.channel.LinkCsi`
(fading and path loss kept apart, SNR gain and fade floor applied) or a plain
array of composite CSI values, in which case only the SNR gain is applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .channel import LinkCsi

MAX_INBOUND_LINKS = 12
R_FLOOR = 1e-6


class TopologyError(ValueError):
    """Malformed or inconsistent topology description."""


@dataclass(frozen=True)
class Node:
    id: int
    role: str
    position: tuple[float, float]
    mobile: bool = False


@dataclass(frozen=True)
class Link:
    id: int
    tx: int
    rx: int


@dataclass(frozen=True)
class Flow:
    id: int
    source: int
    path: tuple[int, ...]


@dataclass(frozen=True)
class Topology:
    """Directed relay graph with routed flows.

    ``routes`` maps a link id to the set of flow ids crossing it. It is
    derived from the flow paths unless supplied explicitly.
    """

    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    flows: tuple[Flow, ...]
    routes: Mapping[int, frozenset[int]] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate node ids")
        bs = [n for n in self.nodes if n.role == "bs"]
        if len(bs) != 1:
            raise TopologyError("exactly one node must have role 'bs'")
        lids = [l.id for l in self.links]
        if len(set(lids)) != len(lids):
            raise TopologyError("duplicate link ids")
        node_set = set(ids)
        for l in self.links:
            if l.tx not in node_set or l.rx not in node_set:
                raise TopologyError(f"link {l.id} references an unknown node")
            if l.tx == l.rx:
                raise TopologyError(f"link {l.id} is a self-loop")
        by_id = {l.id: l for l in self.links}
        for f in self.flows:
            if not f.path:
                raise TopologyError(f"flow {f.id} has an empty path")
            at = f.source
            for lid in f.path:
                if lid not in by_id:
                    raise TopologyError(f"flow {f.id} uses unknown link {lid}")
                if by_id[lid].tx != at:
                    raise TopologyError(f"flow {f.id} path is not connected at link {lid}")
                at = by_id[lid].rx
            if at != bs[0].id:
                raise TopologyError(f"flow {f.id} does not end at the base station")
        if self.routes is None:
            routes = {l.id: frozenset(f.id for f in self.flows if l.id in f.path) for l in self.links}
            object.__setattr__(self, "routes", routes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_flows(self) -> int:
        return len(self.flows)

    @property
    def bs(self) -> int:
        return next(n.id for n in self.nodes if n.role == "bs")

    @property
    def link_ids(self) -> tuple[int, ...]:
        return tuple(l.id for l in self.links)

    @property
    def flow_ids(self) -> tuple[int, ...]:
        return tuple(f.id for f in self.flows)

    @property
    def relays(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.role == "relay")

    def inbound(self, node: int) -> tuple[int, ...]:
        """L_plus(node): ids of links received by ``node``."""
        return tuple(l.id for l in self.links if l.rx == node)

    def outbound(self, node: int) -> tuple[int, ...]:
        """L_minus(node): ids of links transmitted by ``node``."""
        return tuple(l.id for l in self.links if l.tx == node)

    def receivers(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if self.inbound(n.id))

    def route_matrix(self) -> np.ndarray:
        """(links x flows) 0/1 matrix with entry 1 when the flow crosses the link."""
        fidx = {f: j for j, f in enumerate(self.flow_ids)}
        R = np.zeros((self.n_links, self.n_flows))
        for k, lid in enumerate(self.link_ids):
            for f in self.routes[lid]:
                R[k, fidx[f]] = 1.0
        return R

    def with_routes(self, routes: Mapping[int, Sequence[int]]) -> "Topology":
        return replace(self, routes={k: frozenset(v) for k, v in routes.items()})

    def initial_layout(self) -> tuple[list[int], np.ndarray, list[bool]]:
        ids = [n.id for n in self.nodes]
        pos = np.array([n.position for n in self.nodes], dtype=float)
        return ids, pos, [n.mobile for n in self.nodes]


def topology_from_dict(doc: Mapping[str, Any]) -> Topology:
    """Build a topology from the JSON document layout.

    Node ``position`` is either ``[x, y]`` or the string ``"mobile"``; mobile
    nodes give their starting point (the centre of their roaming disk) under
    ``home``. A node may also carry ``"mobile": true`` next to a coordinate.
    """
    try:
        nodes = []
        for n in doc["nodes"]:
            pos = n.get("position")
            mobile = bool(n.get("mobile", False))
            if pos == "mobile":
                mobile = True
                pos = n["home"]
            if not (isinstance(pos, (list, tuple)) and len(pos) == 2):
                raise TopologyError(f"node {n.get('id')} needs a 2-D position")
            nodes.append(Node(int(n["id"]), str(n["role"]), (float(pos[0]), float(pos[1])), mobile))
        links = [Link(int(l["id"]), int(l["tx"]), int(l["rx"])) for l in doc["links"]]
        flows = [
            Flow(int(f["id"]), int(f["source"]), tuple(int(x) for x in f["path"]))
            for f in doc["flows"]
        ]
    except (KeyError, TypeError) as exc:
        raise TopologyError(f"malformed topology document: {exc!r}") from exc
    return Topology(tuple(nodes), tuple(links), tuple(flows))


def load_topology(path: str | Path) -> Topology:
    with open(path, encoding="utf-8") as fh:
        return topology_from_dict(json.load(fh))


def default_topology() -> Topology:
    """The bundled two-relay, four-user scenario."""
    text = resources.files("mtnetopt").joinpath("data/relay_fig1.json").read_text("utf-8")
    return topology_from_dict(json.loads(text))


def single_link_topology(distance: float = 75.0) -> Topology:
    """One user talking straight to the base station."""
    return Topology(
        nodes=(Node(0, "bs", (0.0, 0.0)), Node(1, "user", (distance, 0.0))),
        links=(Link(1, 1, 0),),
        flows=(Flow(1, 1, (1,)),),
    )


# --------------------------------------------------------------------------
# Problem instance
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Receiver:
    node: int
    links: tuple[int, ...]  # positions into the link vector
    mask_to_constraint: np.ndarray  # bitmask over ``links`` -> constraint index


class RelayProblem:
    """Power and flow control over MAC capacity regions.

    Parameters
    ----------
    topo : Topology
    V : float
        Price of one unit of transmit power in utility units.
    snr_gain : float
        Linear gain applied to every |h|^2.
    fade_floor : float
        Lower clamp on the fading magnitude |h_s| when ``h`` is a LinkCsi.
        Zero disables it.
    """

    def __init__(
        self, topo: Topology, V: float = 1.0, snr_gain: float = 1.0, fade_floor: float = 0.0
    ) -> None:
        if V <= 0:
            raise ValueError("V must be > 0")
        if snr_gain <= 0:
            raise ValueError("snr_gain must be > 0")
        if fade_floor < 0:
            raise ValueError("fade_floor must be >= 0")
        self.topo = topo
        self.V = float(V)
        self.snr_gain = float(snr_gain)
        self.fade_floor = float(fade_floor)
        link_pos = {lid: k for k, lid in enumerate(topo.link_ids)}
        subsets: list[tuple[int, tuple[int, ...]]] = []
        receivers = []
        for m in topo.receivers():
            inbound = topo.inbound(m)
            if len(inbound) > MAX_INBOUND_LINKS:
                raise TopologyError(
                    f"node {m} has {len(inbound)} inbound links; at most {MAX_INBOUND_LINKS} supported"
                )
            idx = tuple(link_pos[l] for l in inbound)
            table = np.full(1 << len(idx), -1, dtype=int)
            for mask in range(1, 1 << len(idx)):
                members = tuple(idx[b] for b in range(len(idx)) if mask >> b & 1)
                table[mask] = len(subsets)
                subsets.append((m, members))
            receivers.append(Receiver(m, idx, table))
        self.subsets = tuple(subsets)
        self.receivers = tuple(receivers)
        self.B = np.zeros((len(subsets), topo.n_links))
        for i, (_, members) in enumerate(subsets):
            self.B[i, list(members)] = 1.0
        self.R = topo.route_matrix()
        self.N = self.B @ self.R

    @property
    def W(self) -> int:
        return len(self.subsets)

    @property
    def n_links(self) -> int:
        return self.topo.n_links

    @property
    def n_flows(self) -> int:
        return self.topo.n_flows

    @property
    def n_x(self) -> int:
        return self.n_links + self.W

    def with_topology(self, topo: Topology) -> "RelayProblem":
        return RelayProblem(topo, self.V, self.snr_gain, self.fade_floor)

    # ---- channel gains -------------------------------------------------

    def gains(self, h) -> np.ndarray:
        """Effective |h_k|^2 per link."""
        if isinstance(h, LinkCsi):
            mag = np.maximum(np.abs(h.h_s), self.fade_floor)
            return self.snr_gain * h.h_l**2 * mag**2
        return self.snr_gain * np.abs(np.asarray(h)) ** 2

    def gain_derivatives(self, h) -> tuple[np.ndarray, np.ndarray]:
        """(d|h|^2/d|h_s|, d|h|^2/dh_l) per link.

        For plain composite CSI the first entry differentiates with respect
        to |h| and the second is zero.
        """
        if isinstance(h, LinkCsi):
            mag = np.abs(h.h_s)
            active = mag > self.fade_floor
            d_mag = np.where(active, 2.0 * self.snr_gain * h.h_l**2 * mag, 0.0)
            eff = np.maximum(mag, self.fade_floor)
            d_hl = 2.0 * self.snr_gain * h.h_l * eff**2
            return d_mag, d_hl
        mag = np.abs(np.asarray(h))
        return 2.0 * self.snr_gain * mag, np.zeros_like(mag)

    def decoding_chain(self, h) -> np.ndarray:
        """Boolean mask over constraints on each receiver's decoding chain.

        The chain is the nested family {weakest}, {two weakest}, ..., all
        links, ordered by current gain. Only these constraints can carry a
        positive multiplier at an optimum.
        """
        q = self.gains(h)
        mask = np.zeros(self.W, dtype=bool)
        for rc in self.receivers:
            order = np.argsort(q[list(rc.links)], kind="stable")
            bits = np.cumsum(1 << order)
            mask[rc.mask_to_constraint[bits]] = True
        return mask


# --------------------------------------------------------------------------
# Point type and elementary maps
# --------------------------------------------------------------------------


@dataclass
class PrimalDualPoint:
    p: np.ndarray
    lam: np.ndarray
    r: np.ndarray

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.r = np.asarray(self.r, dtype=float)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.p, self.lam])

    def copy(self) -> "PrimalDualPoint":
        return PrimalDualPoint(self.p.copy(), self.lam.copy(), self.r.copy())


def link_rates(r, topo: Topology) -> np.ndarray:
    """c_k = sum of the rates of the flows crossing link k."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("rates must be >= 0")
    return topo.route_matrix() @ r


def _check_rates(r: np.ndarray) -> None:
    if np.any(~(r > 0)):
        raise ValueError("log utility needs every rate > 0")


def mac_residuals(r, p, h, problem: RelayProblem) -> np.ndarray:
    """g_i = sum_{k in S_i} c_k - log(1 + sum_{k in S_i} |h_k|^2 p_k)."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("powers must be >= 0")
    q = problem.gains(h)
    return problem.N @ np.asarray(r, dtype=float) - np.log1p(problem.B @ (q * p))


def flow_balance_residual(r, topo: Topology) -> dict[int, float]:
    """Inbound minus outbound aggregate rate at every relay."""
    c = dict(zip(topo.link_ids, topo.route_matrix() @ np.asarray(r, dtype=float)))
    return {
        m: float(sum(c[k] for k in topo.inbound(m)) - sum(c[k] for k in topo.outbound(m)))
        for m in topo.relays
    }


def objective(p, r, problem: RelayProblem) -> float:
    """sum_j log r_j - V sum_k p_k."""
    r = np.asarray(r, dtype=float)
    _check_rates(r)
    return float(np.sum(np.log(r)) - problem.V * np.sum(p))


def lagrangian_and_grads(
    point: PrimalDualPoint, h, problem: RelayProblem
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Lagrangian value and its gradients with respect to p, lam and r."""
    _check_rates(point.r)
    if np.any(point.p < 0):
        raise ValueError("powers must be >= 0")
    q = problem.gains(h)
    u = problem.B @ (q * point.p)
    g = problem.N @ point.r - np.log1p(u)
    L = float(np.sum(np.log(point.r)) - problem.V * np.sum(point.p) - point.lam @ g)
    d_p = -problem.V + q * (problem.B.T @ (point.lam / (1.0 + u)))
    d_r = 1.0 / point.r - problem.N.T @ point.lam
    return L, d_p, -g, d_r


@dataclass(frozen=True)
class SecondDerivatives:
    """Jacobian blocks of the optimality map and of the rate gradient.

    ``Gx`` is the Jacobian of (dL/dp, lam * g) with respect to (p, lam);
    ``G_hs``, ``G_hl`` and ``G_y`` differentiate the same map with respect to
    fading magnitudes, path loss and rates. ``T_y`` and ``T_hl`` differentiate
    dL/dr with the inner variables held fixed.
    """

    Gx: np.ndarray
    G_hs: np.ndarray
    G_hl: np.ndarray
    G_y: np.ndarray
    T_y: np.ndarray
    T_hl: np.ndarray
    H_pp: np.ndarray
    H_plam: np.ndarray
    residual: np.ndarray


def second_derivatives(point: PrimalDualPoint, h, problem: RelayProblem) -> SecondDerivatives:
    _check_rates(point.r)
    B, N = problem.B, problem.N
    p, lam, r = point.p, point.lam, point.r
    q = problem.gains(h)
    dq_mag, dq_hl = problem.gain_derivatives(h)
    u = B @ (q * p)
    inv = 1.0 / (1.0 + u)
    g = N @ r - np.log1p(u)
    Q = B * q  # row i: q_k on members of S_i
    H_pp = -(Q.T * (lam * inv**2)) @ Q
    H_plam = Q.T * inv
    # d/dq_k of dL/dp_j = delta_jk sum_i B_ij lam_i inv_i - q_j sum_i B_ij B_ik lam_i inv_i^2 p_k
    d_q = np.diag(B.T @ (lam * inv)) - (Q.T * (lam * inv**2)) @ (B * p)
    # rows lam_i * g_i
    comp_p = -(lam * inv)[:, None] * Q
    comp_lam = np.diag(g)
    comp_q = -(lam * inv)[:, None] * (B * p)
    comp_r = lam[:, None] * N
    Gx = np.block([[H_pp, H_plam], [comp_p, comp_lam]])
    G_q = np.vstack([d_q, comp_q])
    G_y = np.vstack([np.zeros((problem.n_links, problem.n_flows)), comp_r])
    return SecondDerivatives(
        Gx=Gx,
        G_hs=G_q * dq_mag,
        G_hl=G_q * dq_hl,
        G_y=G_y,
        T_y=np.diag(-1.0 / r**2),
        T_hl=np.zeros((problem.n_flows, problem.n_links)),
        H_pp=H_pp,
        H_plam=H_plam,
        residual=g,
    )


def dual_ascent_jacobian(point: PrimalDualPoint, h, problem: RelayProblem) -> tuple[np.ndarray, np.ndarray]:
    """Jacobian of the primal-dual drift (dL/dp, g) in x and in r.

    Returns ``(M_L, G_r)`` with ``M_L = [[H_pp, H_plam], [-H_plam^T, 0]]``.
    """
    q = problem.gains(h)
    u = problem.B @ (q * point.p)
    inv = 1.0 / (1.0 + u)
    Q = problem.B * q
    H_pp = -(Q.T * (point.lam * inv**2)) @ Q
    H_plam = Q.T * inv
    M = np.block([[H_pp, H_plam], [-H_plam.T, np.zeros((problem.W, problem.W))]])
    G_r = np.vstack([np.zeros((problem.n_links, problem.n_flows)), problem.N])
    return M, G_r
