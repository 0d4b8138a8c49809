import json

import numpy as np
import pytest
from fdcheck import central_jacobian, rel_err, random_interior
from hypothesis import given
from hypothesis import strategies as st

from mtnetopt.channel import LinkCsi
from mtnetopt.network import (
    PrimalDualPoint,
    RelayProblem,
    Topology,
    TopologyError,
    default_topology,
    flow_balance_residual,
    lagrangian_and_grads,
    link_rates,
    load_topology,
    mac_residuals,
    objective,
    second_derivatives,
    single_link_topology,
    topology_from_dict,
)

rates = st.lists(st.floats(0.0, 5.0), min_size=4, max_size=4)


# ---- topology ----------------------------------------------------------------


def test_bundled_topology_inbound_sets_and_routes():
    topo = default_topology()
    assert set(topo.inbound(5)) == {3, 4}
    assert set(topo.inbound(6)) == {2, 5}
    assert set(topo.inbound(0)) == {1, 6}
    assert topo.routes[4] == {4}
    assert topo.routes[5] == {3, 4}
    assert topo.routes[6] == {2, 3, 4}


def test_bundled_topology_has_nine_constraints():
    assert RelayProblem(default_topology()).W == 9


def test_constraint_count_formula():
    topo = default_topology()
    problem = RelayProblem(topo)
    assert problem.W == sum(2 ** len(topo.inbound(m)) - 1 for m in topo.receivers())


def test_topology_rejects_disconnected_path():
    doc = {
        "nodes": [{"id": 0, "role": "bs", "position": [0, 0]}, {"id": 1, "role": "user", "position": [1, 0]},
                  {"id": 2, "role": "relay", "position": [2, 0]}],
        "links": [{"id": 1, "tx": 1, "rx": 2}, {"id": 2, "tx": 1, "rx": 0}],
        "flows": [{"id": 1, "source": 1, "path": [1, 2]}],
    }
    with pytest.raises(TopologyError):
        topology_from_dict(doc)


def test_topology_rejects_path_not_ending_at_bs():
    doc = {
        "nodes": [{"id": 0, "role": "bs", "position": [0, 0]}, {"id": 1, "role": "user", "position": [1, 0]},
                  {"id": 2, "role": "relay", "position": [2, 0]}],
        "links": [{"id": 1, "tx": 1, "rx": 2}],
        "flows": [{"id": 1, "source": 1, "path": [1]}],
    }
    with pytest.raises(TopologyError):
        topology_from_dict(doc)


def test_topology_file_round_trip(tmp_path):
    doc = {
        "nodes": [{"id": 0, "role": "bs", "position": [0, 0]},
                  {"id": 1, "role": "user", "position": "mobile", "home": [80, 0]}],
        "links": [{"id": 7, "tx": 1, "rx": 0}],
        "flows": [{"id": 3, "source": 1, "path": [7]}],
    }
    path = tmp_path / "topo.json"
    path.write_text(json.dumps(doc))
    topo = load_topology(path)
    assert topo.link_ids == (7,) and topo.flow_ids == (3,)
    assert topo.nodes[1].mobile


def test_too_many_inbound_links_rejected():
    from mtnetopt.network import Flow, Link, Node

    users = [Node(i, "user", (float(i), 1.0)) for i in range(1, 14)]
    topo = Topology(
        nodes=(Node(0, "bs", (0.0, 0.0)), *users),
        links=tuple(Link(i, i, 0) for i in range(1, 14)),
        flows=tuple(Flow(i, i, (i,)) for i in range(1, 14)),
    )
    with pytest.raises(TopologyError):
        RelayProblem(topo)


# ---- link rates and balance --------------------------------------------------


def test_link_rates_on_relay_links():
    r = np.array([0.1, 0.2, 0.3, 0.4])
    c = dict(zip(default_topology().link_ids, link_rates(r, default_topology())))
    assert c[5] == pytest.approx(0.7)
    assert c[6] == pytest.approx(0.9)


def test_link_rates_zero():
    assert np.all(link_rates(np.zeros(4), default_topology()) == 0)


def test_link_rates_singleton_route():
    assert link_rates([0.37], single_link_topology())[0] == 0.37


@given(r=rates)
def test_flow_balance_holds_for_any_rates(r):
    residual = flow_balance_residual(r, default_topology())
    assert set(residual) == {5, 6}
    assert all(abs(v) <= 1e-12 * (1 + sum(r)) for v in residual.values())


def test_flow_balance_detects_dropped_flow():
    topo = default_topology()
    routes = {k: set(v) for k, v in topo.routes.items()}
    routes[6].discard(2)
    broken = topo.with_routes(routes)
    residual = flow_balance_residual([1.0, 1.0, 1.0, 1.0], broken)
    assert residual[6] != 0


# ---- residuals and objective -------------------------------------------------


def test_single_link_residual_value():
    problem = RelayProblem(single_link_topology())
    g = mac_residuals([0.5], [1.0], np.array([1.0]), problem)
    assert g[0] == pytest.approx(0.5 - np.log(2.0), abs=1e-15)
    assert g[0] == pytest.approx(-0.1931, abs=1e-4)


def test_zero_rate_zero_power_is_boundary():
    problem = RelayProblem(default_topology())
    g = mac_residuals(np.zeros(4), np.zeros(6), np.ones(6), problem)
    assert np.all(g == 0)


def test_bs_has_three_residuals():
    problem = RelayProblem(default_topology())
    assert sum(1 for m, _ in problem.subsets if m == 0) == 3


def test_negative_power_rejected():
    with pytest.raises(ValueError):
        mac_residuals([0.5], [-1.0], np.array([1.0]), RelayProblem(single_link_topology()))


def test_objective_values():
    problem = RelayProblem(default_topology(), V=1.0)
    assert objective(np.zeros(6), np.ones(4), problem) == 0.0
    assert objective(np.full(6, 1 / 6), np.full(4, np.e), problem) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        objective(np.zeros(6), np.array([1.0, 0.0, 1.0, 1.0]), problem)


@given(seed=st.integers(0, 10_000), t=st.floats(0.0, 1.0))
def test_feasible_set_is_convex(seed, t):
    rng = np.random.default_rng(seed)
    problem = RelayProblem(default_topology())
    h = rng.uniform(0.3, 2.0, 6)
    pts = []
    for _ in range(2):
        p = rng.uniform(0, 2, 6)
        r = rng.uniform(0.01, 1, 4)
        # shrink rates until the pair is feasible
        r = r * min(1.0, 0.999 * np.min(np.log1p(problem.B @ (problem.gains(h) * p)) / (problem.N @ r)))
        pts.append((r, p))
    r = t * pts[0][0] + (1 - t) * pts[1][0]
    p = t * pts[0][1] + (1 - t) * pts[1][1]
    assert np.all(mac_residuals(r, p, h, problem) <= 1e-12)


# ---- Lagrangian and derivatives ----------------------------------------------


def test_lagrangian_without_multipliers_is_objective(relay, relay_csi):
    point = PrimalDualPoint(np.full(6, 0.3), np.zeros(9), np.full(4, 0.4))
    L, *_ = lagrangian_and_grads(point, relay_csi, relay)
    assert L == pytest.approx(objective(point.p, point.r, relay), abs=1e-15)


def test_single_link_power_gradient_closed_form():
    problem = RelayProblem(single_link_topology(), V=1.3)
    h = np.array([0.8])
    point = PrimalDualPoint([0.4], [2.0], [0.3])
    _, d_p, _, _ = lagrangian_and_grads(point, h, problem)
    assert d_p[0] == pytest.approx(-1.3 + 2.0 * 0.64 / (1 + 0.64 * 0.4), rel=1e-14)


def _grads(problem, csi, p, lam, r):
    return lagrangian_and_grads(PrimalDualPoint(p, lam, r), csi, problem)


@pytest.mark.parametrize("seed", range(5))
def test_first_derivatives_match_finite_differences(relay, seed):
    point, csi = random_interior(relay, np.random.default_rng(seed))
    _, d_p, d_lam, d_r = _grads(relay, csi, point.p, point.lam, point.r)
    f = lambda x: _grads(relay, csi, x[:6], x[6:15], x[15:])[0]
    fd = central_jacobian(lambda x: [f(x)], np.concatenate([point.p, point.lam, point.r]))[0]
    assert rel_err(np.concatenate([d_p, d_lam, d_r]), fd) <= 1e-6


def _kkt_map(problem, csi, p, lam, r):
    _, d_p, d_lam, _ = _grads(problem, csi, p, lam, r)
    return np.concatenate([d_p, lam * -d_lam])


@pytest.mark.parametrize("seed", range(5))
def test_second_derivatives_match_finite_differences(relay, seed):
    point, csi = random_interior(relay, np.random.default_rng(100 + seed))
    sd = second_derivatives(point, csi, relay)
    n = relay.n_links
    gx = central_jacobian(lambda x: _kkt_map(relay, csi, x[:n], x[n:], point.r), point.x)
    gy = central_jacobian(lambda r: _kkt_map(relay, csi, point.p, point.lam, r), point.r)
    phase = csi.h_s / np.abs(csi.h_s)
    ghs = central_jacobian(
        lambda m: _kkt_map(relay, LinkCsi(m * phase, csi.h_l), point.p, point.lam, point.r), np.abs(csi.h_s)
    )
    ghl = central_jacobian(
        lambda hl: _kkt_map(relay, LinkCsi(csi.h_s, hl), point.p, point.lam, point.r), csi.h_l
    )
    ty = central_jacobian(lambda r: _grads(relay, csi, point.p, point.lam, r)[3], point.r)
    thl = central_jacobian(lambda hl: _grads(relay, LinkCsi(csi.h_s, hl), point.p, point.lam, point.r)[3], csi.h_l)
    for analytic, numeric in [(sd.Gx, gx), (sd.G_y, gy), (sd.G_hs, ghs), (sd.G_hl, ghl), (sd.T_y, ty), (sd.T_hl, thl)]:
        assert rel_err(analytic, numeric) <= 1e-5


def test_rate_hessian_diagonal_is_log_curvature(relay, relay_csi):
    point = PrimalDualPoint(np.full(6, 0.3), np.full(9, 0.2), np.array([0.2, 0.5, 1.0, 2.0]))
    assert np.allclose(np.diag(second_derivatives(point, relay_csi, relay).T_y), -1 / point.r**2, rtol=1e-15)


def test_zero_multipliers_leave_only_residual_diagonal(relay, relay_csi):
    point = PrimalDualPoint(np.full(6, 0.3), np.zeros(9), np.full(4, 0.4))
    sd = second_derivatives(point, relay_csi, relay)
    lower = sd.Gx[relay.n_links:]
    assert np.all(lower[:, : relay.n_links] == 0)
    assert np.allclose(lower[:, relay.n_links:], np.diag(sd.residual))


def test_gains_apply_fade_floor_and_snr():
    problem = RelayProblem(single_link_topology(), snr_gain=2.0, fade_floor=0.5)
    csi = LinkCsi(np.array([0.1 + 0j]), np.array([3.0]))
    assert problem.gains(csi)[0] == pytest.approx(2.0 * 9.0 * 0.25)
