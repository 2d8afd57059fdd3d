import warnings

import numpy as np
import pytest
from scipy import stats as sst

from muxloop import sim
from muxloop.errors import CapacityError, ParameterError, UndefinedEstimateError
from muxloop.fsm import SwitchTiming, stored_bin, validate_trace
from muxloop.model import (
    ChannelModel,
    Law,
    MuxConfig,
    PhotonStatistics,
    arrival_offset_and_overlap,
    first_fire_distribution,
    herald_click_prob,
    heralded_g2_moments,
    multiplexed_coincidence_prob,
)
from muxloop.sim import (
    SimConfig,
    controller_traces,
    estimate_g2,
    g2_from_counts,
    generate_timetags,
    merge_results,
    simulate_cycles,
    simulate_range,
)

REF = SimConfig(cycles=200_000, seed=11)


def _same(a, b):
    assert a.summary == b.summary
    for f in ("fired_cycle", "fired_bin", "signal_out", "fired_pairs"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


# -- configuration ----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ParameterError):
        SimConfig(cycles=0)
    with pytest.raises(ParameterError):
        SimConfig(cycles=10, seed=-1)
    with pytest.raises(ParameterError):
        SimConfig(cycles=10, dark_rate_hz=-1.0)
    with pytest.raises(CapacityError):
        SimConfig(cycles=sim.MAX_CYCLES + 1)
    with pytest.raises(ParameterError):
        SimConfig(cycles=10, timing=SwitchTiming(latency_ns=250))


# -- determinism and sharding ----------------------------------------------------


def test_identical_configs_identical_results():
    _same(simulate_cycles(REF), simulate_cycles(REF))
    other = simulate_cycles(REF.with_(seed=12))
    assert other.summary != simulate_cycles(REF).summary


def test_thread_count_does_not_change_results():
    cfg = REF.with_(cycles=300_000)
    _same(simulate_cycles(cfg, threads=1), simulate_cycles(cfg, threads=4))


@pytest.mark.parametrize("cuts", [(1,), (70_000, 131_072), (5, 65_536, 65_537, 150_000)])
def test_shards_merge_to_the_whole_run(cuts):
    whole = simulate_cycles(REF)
    edges = [0, *cuts, REF.cycles]
    parts = [simulate_range(REF, a, b) for a, b in zip(edges, edges[1:])]
    _same(merge_results(parts[::-1]), whole)
    # merging is associative: pairwise summaries give the same totals
    acc = parts[-1].summary
    for p in parts[-2::-1]:
        acc = p.summary.merge(acc)
    assert acc == whole.summary


def test_merge_rejects_gaps():
    with pytest.raises(ParameterError):
        merge_results([simulate_range(REF, 0, 10), simulate_range(REF, 20, 30)])


def test_tag_streams_are_deterministic_and_shardable():
    cfg = REF.with_(cycles=140_000, dark_rate_hz=2e3, jitter_ps=30.0, hbt_split=True)
    a, b = generate_timetags(cfg), generate_timetags(cfg)
    for role in a.channels:
        np.testing.assert_array_equal(a[role], b[role])
    first, second = generate_timetags(cfg, 0, 70_001), generate_timetags(cfg, 70_001, cfg.cycles)
    for role in a.channels:
        np.testing.assert_array_equal(np.concatenate([first[role], second[role]]), a[role])


# -- agreement with the closed form ------------------------------------------------


@pytest.mark.parametrize(
    "law,mu,ch,m",
    [
        ("thermal", 0.009, ChannelModel(), 1),
        ("thermal", 0.009, ChannelModel(), 11),
        ("poisson", 0.05, ChannelModel(eta_h=0.3, eta_s_prime=0.5, loss_db_per_round_trip=2.0), 6),
        ("thermal", 0.3, ChannelModel(eta_h=0.6, eta_s_prime=0.8, loss_db_per_round_trip=0.5), 4),
    ],
)
def test_oracle_agreement(law, mu, ch, m):
    stats = PhotonStatistics(law, mu)
    cfg = SimConfig(cycles=10**7, seed=2024, stats=stats, channels=ch, mux=MuxConfig(m=m))
    s = simulate_cycles(cfg).summary
    p = multiplexed_coincidence_prob(stats, ch, m)
    assert abs(s.p_m_hat - p) < 3 * s.stderr
    lo, hi = s.ci95
    assert lo <= s.p_m_hat <= hi
    q = herald_click_prob(stats, ch.eta_h)
    ph = 1 - (1 - q) ** m
    assert abs(s.p_h_hat - ph) < 3 * np.sqrt(ph * (1 - ph) / cfg.cycles)


def test_first_fire_histogram_is_geometric():
    stats = PhotonStatistics(Law.THERMAL, 0.2)
    ch = ChannelModel(eta_h=0.5)
    cfg = SimConfig(cycles=400_000, seed=5, stats=stats, channels=ch, mux=MuxConfig(m=8))
    s = simulate_cycles(cfg).summary
    masses, none = first_fire_distribution(herald_click_prob(stats, ch.eta_h), 8)
    observed = np.array([*s.first_fire_counts, cfg.cycles - s.heralded_cycles])
    expected = cfg.cycles * np.array([*masses, none])
    assert sst.chisquare(observed, expected).pvalue > 1e-3


def test_dark_source_emits_nothing():
    cfg = REF.with_(stats=PhotonStatistics(Law.THERMAL, 0.0))
    s = simulate_cycles(cfg).summary
    assert s.heralded_cycles == s.herald_clicks == s.output_clicks == 0
    stream = generate_timetags(cfg)
    assert stream["Herald"].size == stream["Signal"].size == stream["SwitchCmd"].size == 0


def test_saturated_source_fires_every_cycle():
    cfg = SimConfig(
        cycles=20_000,
        seed=3,
        stats=PhotonStatistics(Law.POISSON, 30.0),
        channels=ChannelModel(eta_h=1.0, eta_s_prime=1.0, loss_db_per_round_trip=0.0),
        mux=MuxConfig(m=1),
    )
    r = simulate_cycles(cfg)
    assert r.summary.heralded_cycles == r.summary.output_clicks == cfg.cycles
    assert np.all(r.signal_out >= 1)
    assert all(o.herald_detected and o.signal_photons_out >= 1 for o in r.outcomes())


def test_outcomes_are_consistent():
    cfg = SimConfig(cycles=50_000, seed=8, stats=PhotonStatistics(Law.THERMAL, 0.1), mux=MuxConfig(m=11))
    r = simulate_cycles(cfg)
    assert r.fired_cycle.size == r.summary.heralded_cycles > 0
    assert np.all(np.diff(r.fired_cycle) > 0)
    assert np.all(r.signal_out <= r.fired_pairs)
    assert np.all(r.fired_pairs >= 1)
    assert r.summary.pairs_in_fired_bins == r.fired_pairs.sum()
    for i in r.fired_cycle[:200].tolist():
        o = r.outcome(i)
        assert o.round_trips == 11 - o.fired_bin + 1
        assert o.output_offset_ps == arrival_offset_and_overlap(o.round_trips, 1, cfg.mux)[0] + cfg.mux.delta_tau_ps
    quiet = next(c for c in range(cfg.cycles) if c not in set(r.fired_cycle[:1000].tolist()))
    assert r.outcome(quiet).fired_bin is None and r.outcome(quiet).signal_photons_out == 0
    with pytest.raises(IndexError):
        r.outcome(cfg.cycles)


def test_single_cycle_run_has_wide_interval():
    s = simulate_cycles(SimConfig(cycles=1, seed=0)).summary
    lo, hi = s.ci95
    assert lo == 0.0 and hi > 0.7


def test_controller_traces_match_simulated_decisions():
    cfg = SimConfig(cycles=5_000, seed=4, stats=PhotonStatistics(Law.THERMAL, 0.2), channels=ChannelModel(eta_h=0.5))
    r = simulate_cycles(cfg)
    traces = controller_traces(cfg, 2_000)
    fired = dict(zip(r.fired_cycle.tolist(), r.fired_bin.tolist()))
    assert len(traces) == 2_000
    for c, tr in enumerate(traces):
        assert stored_bin(tr) == fired.get(c)
        assert validate_trace(tr, cfg.mux) == []


# -- time tags -----------------------------------------------------------------------


def test_stored_photon_arrives_k_loop_mismatches_late():
    stats = PhotonStatistics(Law.THERMAL, 0.5)
    cfg = SimConfig(cycles=3_000, seed=9, stats=stats, channels=ChannelModel(eta_h=0.8, eta_s_prime=1.0, loss_db_per_round_trip=0.0), mux=MuxConfig(m=3))
    r = simulate_cycles(cfg)
    stream = generate_timetags(cfg)
    mux = cfg.mux
    idx = r.fired_cycle[(r.fired_bin == 1) & (r.signal_out > 0)]
    assert idx.size > 100
    nominal = idx * mux.period_ps + mux.m * mux.tau_ps + mux.delay_ps
    # k = 3 trips: two mismatches relative to a single-trip photon, plus its own
    expect = arrival_offset_and_overlap(3, 1, mux)[0] + mux.delta_tau_ps
    assert expect == 5100
    sig = stream["Signal"]
    hit = np.searchsorted(sig, nominal + expect)
    np.testing.assert_array_equal(sig[hit], nominal + 5100)
    # release marks lead each stored photon by one switch rise time
    marks = np.searchsorted(stream["SwitchCmd"], nominal - cfg.timing.rise_ps)
    np.testing.assert_array_equal(stream["SwitchCmd"][marks], nominal - 8000)


def test_tags_are_sorted_and_inside_their_cycles():
    cfg = SimConfig(cycles=20_000, seed=1, stats=PhotonStatistics(Law.THERMAL, 0.1), mux=MuxConfig(m=11))
    stream = generate_timetags(cfg)
    assert stream.duration_ps == cfg.cycles * cfg.mux.period_ps
    r = simulate_cycles(cfg)
    for role, ts in stream.channels.items():
        assert np.all(np.diff(ts) >= 0)
        assert ts.size == 0 or (ts[0] >= 0 and ts[-1] < stream.duration_ps)
    assert stream["SwitchCmd"].size == r.summary.heralded_cycles
    assert stream["Herald"].size == r.summary.herald_clicks
    np.testing.assert_array_equal(stream["SwitchCmd"] // cfg.mux.period_ps, r.fired_cycle)


def test_dark_counts_are_poisson():
    cfg = SimConfig(cycles=100_000, seed=21, stats=PhotonStatistics(Law.THERMAL, 0.0), dark_rate_hz=1e5)
    stream = generate_timetags(cfg)
    expected = 1e5 * stream.duration_s
    for role in ("Herald", "Signal"):
        assert abs(stream[role].size - expected) < 4 * np.sqrt(expected)
    assert stream["SwitchCmd"].size == 0


def test_dead_time_enforced():
    cfg = SimConfig(cycles=20_000, seed=2, stats=PhotonStatistics(Law.THERMAL, 0.0), dark_rate_hz=2e7, dead_time_ns=50.0)
    stream = generate_timetags(cfg)
    for role in ("Herald", "Signal"):
        assert stream[role].size > 1000
        assert np.diff(stream[role]).min() >= 50_000
    free = generate_timetags(cfg.with_(dead_time_ns=0.0))
    assert free["Herald"].size > stream["Herald"].size


def test_jitter_moves_tags_slightly():
    cfg = SimConfig(cycles=20_000, seed=6, stats=PhotonStatistics(Law.THERMAL, 0.2), channels=ChannelModel(eta_h=0.5))
    a = generate_timetags(cfg)
    b = generate_timetags(cfg.with_(jitter_ps=20.0))
    assert a["Herald"].size == b["Herald"].size
    d = b["Herald"] - a["Herald"]
    assert 0 < np.abs(d).max() < 200
    assert abs(d.std() - 20.0) < 2.0
    np.testing.assert_array_equal(a["SwitchCmd"], b["SwitchCmd"])


def test_detector_latency_shifts_heralds():
    cfg = SimConfig(cycles=20_000, seed=6, stats=PhotonStatistics(Law.THERMAL, 0.2), channels=ChannelModel(eta_h=0.5))
    a = generate_timetags(cfg)
    b = generate_timetags(cfg.with_(detector_latency_ns=3.0))
    np.testing.assert_array_equal(b["Herald"] - a["Herald"], 3000)
    np.testing.assert_array_equal(a["Signal"], b["Signal"])


# -- heralded g2 ---------------------------------------------------------------------


def test_g2_requires_split():
    with pytest.raises(ParameterError):
        estimate_g2(REF)


def test_g2_undefined_without_heralds():
    cfg = REF.with_(stats=PhotonStatistics(Law.THERMAL, 0.0), hbt_split=True)
    with pytest.raises(UndefinedEstimateError):
        estimate_g2(cfg)
    with pytest.raises(UndefinedEstimateError):
        g2_from_counts(0, 0, 0, 0)


def test_g2_single_pairs_give_zero(monkeypatch):
    # force every occupied bin to hold exactly one pair
    monkeypatch.setattr(sim._ConditionalSampler, "draw", lambda self, rng, size: np.ones(size, dtype=np.int64))
    cfg = SimConfig(
        cycles=200_000,
        seed=1,
        stats=PhotonStatistics(Law.THERMAL, 0.3),
        channels=ChannelModel(eta_h=1.0, eta_s_prime=1.0, loss_db_per_round_trip=0.0),
        mux=MuxConfig(m=1),
        hbt_split=True,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = estimate_g2(cfg)
    assert est.n_h > 10_000 and est.n_ha > 0 and est.n_hb > 0
    assert est.n_hab == 0
    assert est.value == 0.0


def test_g2_low_statistics_warning():
    cfg = REF.with_(cycles=100_000, hbt_split=True)
    with pytest.warns(UserWarning, match="low-statistics"):
        est = estimate_g2(cfg)
    assert est.low_statistics


def test_g2_vanishes_toward_weak_pumping():
    base = dict(seed=31, channels=ChannelModel(eta_h=1.0, eta_s_prime=1.0, loss_db_per_round_trip=0.0), mux=MuxConfig(m=1), hbt_split=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = [estimate_g2(SimConfig(cycles=10**6, stats=PhotonStatistics(Law.THERMAL, mu), **base)).value for mu in (0.3, 0.03, 1e-4)]
    assert g[0] > g[1] > g[2]
    assert g[2] < 0.01


def test_g2_estimate_matches_moments():
    stats = PhotonStatistics(Law.THERMAL, 0.05)
    cfg = SimConfig(
        cycles=10**7,
        seed=77,
        stats=stats,
        channels=ChannelModel(eta_h=0.5, eta_s_prime=1.0, loss_db_per_round_trip=0.0),
        mux=MuxConfig(m=1),
        hbt_split=True,
    )
    est = estimate_g2(cfg)
    ref = heralded_g2_moments(stats, 0.5)
    assert not est.low_statistics
    assert abs(est.value - ref) < 4 * est.stderr
