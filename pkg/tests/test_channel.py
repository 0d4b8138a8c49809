import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtnetopt.channel import (
    ChannelParams,
    ChannelProcess,
    LevyParams,
    LinkCsi,
    MobilityState,
    OuFading,
    PathLoss,
    composite_csi,
    epsilon_bound,
    mobility_step,
    ou_step,
    path_loss_from_positions,
    path_loss_value,
    truncated_pareto,
    v_max_for_epsilon,
    write_trajectory_csv,
)
from mtnetopt.network import default_topology

C0 = 75.0**1.8


# ---- OU fading -------------------------------------------------------------


def test_ou_zero_dt_is_bit_exact():
    state = OuFading(np.array([0.3 + 0.1j, -1.2j]), a_H=10.0)
    out = ou_step(state, 0.0, np.random.default_rng(0))
    assert np.array_equal(out.h_s, state.h_s)


def test_ou_rejects_negative_dt_and_rate():
    with pytest.raises(ValueError):
        ou_step(OuFading(np.zeros(1), 1.0), -1e-3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        OuFading(np.zeros(1), -1.0)


def test_ou_zero_rate_freezes_process():
    state = OuFading(np.array([0.5 - 0.5j]), a_H=0.0)
    out = ou_step(state, 5.0, np.random.default_rng(1))
    assert np.array_equal(out.h_s, state.h_s)


def test_ou_long_step_from_zero_is_standard_complex_gaussian():
    state = OuFading(np.zeros(10**6, dtype=complex), a_H=1.0)
    out = ou_step(state, 60.0, np.random.default_rng(2))
    assert abs(np.mean(np.abs(out.h_s) ** 2) - 1.0) <= 0.01
    assert abs(np.var(out.h_s.real) - 0.5) <= 0.01
    assert abs(np.mean(out.h_s)) <= 0.01


@pytest.mark.parametrize("lag_in_units", [0.1, 1.0])
def test_ou_autocovariance_matches_exact_law(lag_in_units):
    a_H = 10.0
    lag = lag_in_units / a_H
    rng = np.random.default_rng(3)
    start = OuFading((rng.standard_normal(200_000) + 1j * rng.standard_normal(200_000)) / np.sqrt(2), a_H)
    out = ou_step(start, lag, rng)
    acov = np.mean(out.h_s * np.conj(start.h_s))
    assert abs(acov - np.exp(-a_H * lag / 2)) <= 0.02


def test_ou_substeps_equal_one_step_in_distribution():
    rng = np.random.default_rng(4)
    one = ou_step(OuFading(np.ones(100_000, dtype=complex), 5.0), 0.2, rng).h_s
    many = OuFading(np.ones(100_000, dtype=complex), 5.0)
    for _ in range(10):
        many = ou_step(many, 0.02, rng)
    assert abs(one.mean() - many.h_s.mean()) < 0.01
    assert abs(np.var(one) - np.var(many.h_s)) < 0.01


def test_ou_same_seed_same_trajectory():
    def run(seed):
        rng = np.random.default_rng(seed)
        s = OuFading(np.zeros(3, dtype=complex), 10.0)
        for _ in range(50):
            s = ou_step(s, 1e-3, rng)
        return s.h_s

    assert np.array_equal(run(9), run(9))


# ---- mobility ----------------------------------------------------------------


def _walker(v_max=2.0, radius=50.0, mobile=True):
    return MobilityState.from_positions([7], np.array([[0.0, 0.0]]), [mobile], LevyParams(v_max, radius))


def test_static_nodes_never_move():
    state = _walker(mobile=False)
    out = mobility_step(state, 10.0, np.random.default_rng(0))
    assert np.array_equal(out.position, state.position)


def test_paused_node_counts_down():
    state = _walker()
    state.pause_remaining[0] = 3.0
    out = mobility_step(state, 1.0, np.random.default_rng(0))
    assert np.array_equal(out.position, state.position)
    assert out.pause_remaining[0] == pytest.approx(2.0, abs=1e-15)


def test_walking_node_displacement_is_speed_times_dt():
    state = _walker()
    state.walking[0] = True
    state.destination[0] = [30.0, 40.0]
    state.speed[0] = 1.5
    out = mobility_step(state, 2.0, np.random.default_rng(0))
    assert np.linalg.norm(out.position[0] - state.position[0]) == pytest.approx(3.0, abs=1e-12)


def test_mobility_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        mobility_step(_walker(), 0.0, np.random.default_rng(0))


@given(seed=st.integers(0, 10_000))
def test_walk_stays_in_region_with_valid_phases(seed):
    rng = np.random.default_rng(seed)
    state = _walker(v_max=5.0, radius=20.0)
    for _ in range(60):
        state = mobility_step(state, 1.0, rng)
        offset = state.position[0] - state.home[0]
        assert np.hypot(*offset) <= 20.0 + 1e-9
        assert state.pause_remaining[0] >= 0
        if state.walking[0]:
            assert 0 < state.speed[0] <= 5.0


@given(beta=st.floats(0.0, 2.0), seed=st.integers(0, 1000))
def test_truncated_pareto_respects_bounds(beta, seed):
    draws = truncated_pareto(np.random.default_rng(seed), beta, 1.0, 100.0, size=200)
    assert np.all(draws >= 1.0 - 1e-12) and np.all(draws <= 100.0 + 1e-9)


# ---- path loss ---------------------------------------------------------------


def test_path_loss_at_minimum_distance_is_one():
    assert path_loss_value(75.0, C0, 1.8, 75.0) == pytest.approx(1.0, rel=1e-14)


def test_path_loss_at_twice_minimum_distance():
    assert path_loss_value(150.0, C0, 1.8, 75.0) == pytest.approx(2.0**-1.8, rel=1e-14)


def test_path_loss_clamps_below_minimum_distance():
    assert path_loss_value(10.0, C0, 1.8, 75.0) == path_loss_value(75.0, C0, 1.8, 75.0)


@given(d=st.floats(0.0, 1e4))
def test_path_loss_positive_and_bounded(d):
    value = path_loss_value(d, C0, 1.8, 75.0)
    assert 0 < value <= C0 * 75.0**-1.8 * (1 + 1e-12)


def test_path_loss_from_positions_matches_link_geometry():
    topo = default_topology()
    ids, pos, mobile = topo.initial_layout()
    mob = MobilityState.from_positions(ids, pos, mobile, LevyParams(0.0))
    pl = path_loss_from_positions(mob, topo, C0, 1.8, 75.0)
    for k, link in enumerate(topo.links):
        d = np.linalg.norm(mob.position_of(link.tx) - mob.position_of(link.rx))
        assert pl.h_l[k] == pytest.approx(C0 * max(d, 75.0) ** -1.8, rel=1e-14)


def test_epsilon_bound_and_inverse():
    eps = epsilon_bound(C0, 1.8, 75.0, 0.5)
    assert eps == pytest.approx(2 * C0 * 1.8 * 75.0**-2.8 * 0.5)
    assert v_max_for_epsilon(eps, C0, 1.8, 75.0) == pytest.approx(0.5)


def test_path_loss_rate_respects_epsilon():
    topo = default_topology()
    params = ChannelParams(a_H=10.0, v_max=v_max_for_epsilon(6e-4, C0, 1.8, 75.0))
    proc = ChannelProcess.start(topo, params, seed=5)
    prev = proc.csi().h_l
    for _ in range(2000):
        now = proc.advance(0.05).h_l
        assert np.all(np.abs(now - prev) <= params.epsilon * 0.05 * (1 + 1e-9))
        prev = now


def test_timescale_separation_with_default_parameters():
    topo = default_topology()
    params = ChannelParams(a_H=1.0, v_max=v_max_for_epsilon(6e-4, C0, 1.8, 75.0))
    proc = ChannelProcess.start(topo, params, seed=11)
    prev = proc.csi()
    d_hs, d_hl = [], []
    for _ in range(3000):
        now = proc.advance(1e-3)
        d_hs.append(np.mean(np.abs(now.h_s - prev.h_s) / np.abs(prev.h_s)))
        d_hl.append(np.mean(np.abs(now.h_l - prev.h_l) / prev.h_l))
        prev = now
    assert np.mean(d_hl) * 100 <= np.mean(d_hs)


# ---- composite CSI -----------------------------------------------------------


def _pl(values):
    return PathLoss(np.asarray(values, float), C0, 1.8, 75.0)


def test_composite_identity_scaling():
    z = np.array([0.3 - 0.4j, 1.0 + 2.0j])
    assert np.array_equal(composite_csi(OuFading(z, 1.0), _pl([1.0, 1.0])), z)


def test_composite_zero_fading():
    h = composite_csi(OuFading(np.zeros(2), 1.0), _pl([0.5, 2.0]))
    assert np.all(np.abs(h) ** 2 == 0)


def test_composite_modulus():
    h = composite_csi(OuFading(np.array([3.0 + 0j]), 1.0), _pl([2.0]))
    assert np.abs(h[0]) ** 2 == pytest.approx(36.0)


def test_composite_rejects_length_mismatch():
    with pytest.raises(ValueError):
        composite_csi(OuFading(np.zeros(2), 1.0), _pl([1.0]))


def test_link_csi_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        LinkCsi(np.zeros(2, complex), np.ones(3))


# ---- process and dumps -------------------------------------------------------


def test_channel_process_is_reproducible():
    topo = default_topology()
    params = ChannelParams(a_H=10.0, v_max=1.0)
    a = ChannelProcess.start(topo, params, 3)
    b = ChannelProcess.start(topo, params, 3)
    for _ in range(100):
        ca, cb = a.advance(1e-2), b.advance(1e-2)
    assert np.array_equal(ca.h_s, cb.h_s) and np.array_equal(ca.h_l, cb.h_l)


def test_trajectory_csv_columns(tmp_path):
    csis = [LinkCsi(np.array([1 + 1j, 0.5j]), np.array([1.0, 0.5]))] * 2
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, [0.0, 0.001], csis, [1, 2])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t_sec", "link_id", "re_hs", "im_hs", "h_l"]
    assert len(rows) == 5
    assert float(rows[1][2]) == 1.0 and float(rows[2][3]) == 0.5
