import logging

import numpy as np
import pytest
from conftest import H_L
from hypothesis import given
from hypothesis import strategies as st

from mtnetopt.channel import LinkCsi
from mtnetopt.config import RunConfig
from mtnetopt.errors import ConfigError, OracleError
from mtnetopt.experiment import (
    FRAME_COLUMNS,
    Scenario,
    baseline1_step,
    baseline2_step,
    joint_optimum,
    mac_outage,
    mean_ci,
    metrics_fold,
    parse_grid,
    required_samples,
    run_grid,
    run_scenario,
    simulate,
    stability_report,
    violation_rates,
    worker_count,
)
from mtnetopt.oracle import solve_inner, solve_outer, stationary_fading_samples

QUICK = RunConfig().with_overrides("experiment", N_T=60, track_errors=False)


def _frames(feasible, sum_rate=None):
    n = len(feasible)
    return {
        "feasible": feasible,
        "sum_rate": sum_rate if sum_rate is not None else [1.0] * n,
        "utility": [0.5] * n,
    }


# ---- metrics ---------------------------------------------------------------------


def test_all_feasible_frames():
    m = metrics_fold(_frames([1, 1, 1], [1.0, 2.0, 3.0]))
    assert m["P_out"] == 0.0 and m["throughput"] == 2.0 and m["utility"] == 0.5


def test_all_infeasible_frames():
    m = metrics_fold(_frames([0, 0]))
    assert m["P_out"] == 1.0 and m["throughput"] == 0.0 and np.isnan(m["utility"])


def test_one_violation_in_four_frames():
    assert metrics_fold(_frames([1, 0, 1, 1]))["P_out"] == 0.25


def test_burn_in_frames_are_skipped():
    m = metrics_fold(_frames([0, 0, 1, 1], [9.0, 9.0, 1.0, 3.0]), burn_in=2)
    assert m["P_out"] == 0.0 and m["throughput"] == 2.0


def test_error_averages_need_error_columns():
    frames = _frames([1, 1])
    assert np.isnan(metrics_fold(frames)["e_x"])
    frames.update(e_x_inst=[1.0, 3.0], e_y_inst=[0.0, 2.0])
    m = metrics_fold(frames)
    assert m["e_x"] == 2.0 and m["e_y"] == 1.0


@given(flags=st.lists(st.booleans(), min_size=1, max_size=50))
def test_outage_probability_in_unit_interval(flags):
    assert 0.0 <= metrics_fold(_frames(flags))["P_out"] <= 1.0


def test_mean_ci():
    ci = mean_ci([1.0, 2.0, 3.0, np.nan])
    assert ci["n"] == 3 and ci["mean"] == 2.0
    assert ci["half_width"] == pytest.approx(1.959963984540054 * 1.0 / np.sqrt(3))
    assert mean_ci([4.0])["half_width"] == 0.0
    assert np.isnan(mean_ci([])["mean"])


def test_outage_margin(relay):
    h = np.ones(6)
    r = np.array([0.3, 0.4, 0.2, 0.5])
    x = solve_inner(r, h, relay)
    # the oracle point is tight, so back off by a hair to clear roundoff
    assert not mac_outage(0.999 * r, x.p, h, relay)
    assert mac_outage(1.01 * r, x.p, h, relay)
    assert not mac_outage(1.01 * r, x.p, h, relay, margin=0.05)


# ---- scenario -------------------------------------------------------------------


def test_scenario_validation():
    with pytest.raises(ConfigError):
        Scenario(QUICK, "baseline9", (0,))
    with pytest.raises(ConfigError):
        Scenario(QUICK, "proposed_comp", ())
    with pytest.raises(ConfigError):
        QUICK.with_overrides("experiment", N_T=0)


def test_frame_counts_from_milliseconds():
    sc = Scenario.from_config(QUICK.with_overrides("solver", tau_ms=2.0), "baseline2_stat")
    assert sc.frames_for(100) == 50 and sc.burn_in == 6


def test_static_optimum_has_no_outage():
    cfg = QUICK.with_overrides("channel", a_H=0.0, epsilon_target=0.0).with_overrides("experiment", N_T=200)
    rec = simulate(Scenario(cfg, "proposed_comp", (0,)), 0)
    assert rec.P_out == 0.0
    assert set(rec.frames) == set(FRAME_COLUMNS)


def test_simulation_is_reproducible():
    sc = Scenario(QUICK.with_overrides("experiment", track_errors=True, N_T=20), "proposed_comp", (3,))
    a, b = simulate(sc, 3), simulate(sc, 3)
    for col in FRAME_COLUMNS:
        assert np.asarray(a.frames[col]).tobytes() == np.asarray(b.frames[col]).tobytes()


def test_run_scenario_aggregates_seeds():
    res = run_scenario(Scenario(QUICK, "baseline3_nocomp", (0, 1, 2)), workers=1)
    assert [r.seed for r in res.records] == [0, 1, 2]
    assert res.aggregate["P_out"]["n"] == 3
    assert res.aggregate["P_out"]["mean"] == pytest.approx(np.mean([r.P_out for r in res.records]))


def test_parallel_and_serial_runs_agree():
    sc = Scenario(QUICK.with_overrides("experiment", N_T=20), "proposed_comp", (0, 1))
    serial = run_scenario(sc, workers=1)
    parallel = run_scenario(sc, workers=2)
    for a, b in zip(serial.records, parallel.records):
        for key, value in a.summary.items():
            np.testing.assert_equal(b.summary[key], value)


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("MTNETOPT_THREADS", "1")
    assert worker_count(8) == 1
    monkeypatch.setenv("MTNETOPT_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count(8)


def test_grid_parsing_and_order():
    key, values = parse_grid("a_H=1,10")
    assert key == "a_H" and values == ["1", "10"]
    with pytest.raises(ConfigError):
        parse_grid("a_H")
    results = run_grid(QUICK.with_overrides("experiment", N_T=10), schemes=["baseline3_nocomp", "proposed_comp"],
                       seeds=[0], grid=("a_H", ["1", "10"]), workers=1)
    assert [(r.scenario.scheme, r.scenario.a_H) for r in results] == [
        ("baseline3_nocomp", 1.0), ("proposed_comp", 1.0), ("baseline3_nocomp", 10.0), ("proposed_comp", 10.0)
    ]


def test_grid_rejects_unknown_key():
    with pytest.raises(ConfigError):
        run_grid(QUICK, seeds=[0], grid=("warp", ["1"]), workers=1)


# ---- baseline 1 -----------------------------------------------------------------------


def test_baseline1_without_delay_is_joint_optimum(relay, relay_csi, oracle_samples):
    x = baseline1_step(relay_csi, relay)
    r_ref = solve_outer(H_L, relay, h_s_samples=oracle_samples[:1])
    assert np.allclose(x.r, r_ref, atol=1e-8)
    assert np.allclose(x.p, solve_inner(r_ref, relay_csi, relay).p, atol=1e-8)


def test_baseline1_shrinks_rates_when_inner_solve_fails(relay, relay_csi, monkeypatch, caplog):
    import mtnetopt.experiment as ex

    real = ex.solve_inner
    cap = 0.5 * solve_outer(H_L, relay, h_s_samples=relay_csi.h_s[None, :])

    def picky(r, h, problem, cfg=None, start=None):
        if np.any(np.asarray(r) > cap):
            raise OracleError("too demanding", 1.0)
        return real(r, h, problem, cfg, start)

    monkeypatch.setattr(ex, "solve_inner", picky)
    with caplog.at_level(logging.WARNING, logger="mtnetopt.experiment"):
        x = baseline1_step(relay_csi, relay)
    assert np.all(x.r <= cap + 1e-12) and np.max(x.r / cap) > 0.99
    assert "shrinking" in caplog.text


@pytest.fixture(scope="module")
def latency_pairs():
    base = RunConfig().with_overrides("channel", a_H=50.0, epsilon_target=6e-4).with_overrides(
        "experiment", N_T=300, track_errors=False)
    out = {}
    for lat in (0, 5):
        cfg = base.with_overrides("experiment", latency_ms=lat)
        out[lat] = [simulate(Scenario(cfg, "baseline1_gcsi", (s,)), s).P_out for s in range(5)]
    return out


def test_signalling_latency_raises_baseline1_outage(latency_pairs):
    assert np.mean(latency_pairs[5]) > np.mean(latency_pairs[0])
    assert all(b > a for a, b in zip(latency_pairs[0], latency_pairs[5]))


@pytest.fixture(scope="module")
def zero_latency_pairs():
    cfg = RunConfig().with_overrides("channel", a_H=10.0, epsilon_target=6e-4).with_overrides(
        "experiment", N_T=300, latency_ms=0, track_errors=False)
    return [(simulate(Scenario(cfg, "baseline1_gcsi", (s,)), s).summary,
             simulate(Scenario(cfg, "proposed_comp", (s,)), s).summary) for s in range(5)]


def test_baseline1_utility_dominates_without_latency(zero_latency_pairs):
    for b1, prop in zero_latency_pairs:
        assert b1["utility"] >= prop["utility"], (b1["utility"], prop["utility"])


def test_baseline1_throughput_dominates_without_latency(zero_latency_pairs):
    for b1, prop in zero_latency_pairs:
        assert b1["throughput"] >= prop["throughput"]


# ---- baseline 2 -----------------------------------------------------------------------


def test_required_sample_counts():
    assert required_samples(0.0, 2048) == 2048
    assert required_samples(0.05, 2048) == 1946
    assert required_samples(1.0, 2048) == 0


def test_zero_outage_budget_covers_every_sample(relay):
    samples = stationary_fading_samples(6, 256, 5)
    x, _ = baseline2_step(H_L, samples, relay, 0.0)
    assert np.all(violation_rates(x, H_L, samples, relay) == 0)


def test_full_outage_budget_ignores_samples(relay):
    samples = stationary_fading_samples(6, 64, 5)
    x, steps = baseline2_step(H_L, samples, relay, 1.0)
    strongest = relay.snr_gain * H_L**2 * np.maximum(np.abs(samples), relay.fade_floor).max(axis=0) ** 2
    assert steps == 0
    assert np.allclose(x.r, joint_optimum(strongest, relay).r)


@pytest.mark.parametrize("seed", range(3))
def test_scenario_design_validates_out_of_sample(relay, seed):
    M, theta = 2048, 0.05
    x, _ = baseline2_step(H_L, stationary_fading_samples(6, M, seed), relay, theta)
    fresh = stationary_fading_samples(6, 20_000, 1000 + seed)
    assert np.all(violation_rates(x, H_L, fresh, relay) <= theta + 2 / np.sqrt(M))


# ---- stability report -------------------------------------------------------------------


def test_stability_report_fields():
    cfg = RunConfig().with_overrides("topology", file="single_link").with_overrides(
        "channel", a_H=1.0).with_overrides("experiment", N_T=60, analysis_frames=3)
    report = stability_report(cfg, seed=0)
    for key in ("params", "margin", "stable", "measured", "rho", "eta", "C", "bound"):
        assert key in report
    assert report["stable"]
    assert report["measured"]["e_x"] + report["measured"]["e_y"] <= report["bound"]
