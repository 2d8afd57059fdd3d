"""Seeded Monte Carlo of multiplexed output cycles and their time tags.

Cycles are grouped into fixed blocks of ``BLOCK_CYCLES``.  Each block draws
from its own Philox stream keyed by ``(seed, block)``, so any cycle can be
replayed from the seed alone and a run split into shards at arbitrary cycle
boundaries reproduces the unsharded result exactly.

Only occupied (cycle, bin) slots are materialised: gaps between slots holding
at least one pair are geometric, and the pair number of an occupied slot is
drawn from the law conditioned on ``n >= 1``.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Optional

import numpy as np
from scipy import stats as _st

from .errors import CapacityError, ParameterError, UndefinedEstimateError
from .fsm import (
    DEFAULT_TIMING,
    SwitchTiming,
    check_timing_closure,
    run_cycle,
    stored_bins_for_patterns,
)
from .model import (
    ChannelModel,
    MuxConfig,
    PhotonStatistics,
    adaptive_n_max,
    pair_number_distribution,
)
from .tags import TagStream

BLOCK_CYCLES = 1 << 16
MAX_CYCLES = 10**12
LOW_STATS_TRIPLES = 100

# substream ids within a block
_PHOTONS, _DARKS, _JITTER = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    cycles: int
    seed: int = 0
    stats: PhotonStatistics = field(default_factory=PhotonStatistics)
    channels: ChannelModel = field(default_factory=ChannelModel)
    mux: MuxConfig = field(default_factory=MuxConfig)
    dead_time_ns: float = 0.0
    dark_rate_hz: float = 0.0
    hbt_split: bool = False
    jitter_ps: float = 0.0
    detector_latency_ns: float = 0.0
    timing: SwitchTiming = DEFAULT_TIMING

    def __post_init__(self):
        if int(self.cycles) != self.cycles or self.cycles < 1:
            raise ParameterError(f"cycles must be an integer >= 1, got {self.cycles!r}")
        if self.cycles > MAX_CYCLES or self.cycles * self.mux.period_ps > 2**62:
            raise CapacityError(f"{self.cycles} cycles exceed the supported run size")
        if not 0 <= self.seed < 2**64:
            raise ParameterError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        for name in ("dead_time_ns", "dark_rate_hz", "jitter_ps", "detector_latency_ns"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        check_timing_closure(self.mux, self.timing)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stats"]["law"] = self.stats.law.value
        return d


@dataclass(frozen=True)
class TrialOutcome:
    cycle_index: int
    fired_bin: Optional[int]
    round_trips: Optional[int]
    herald_detected: bool
    signal_photons_out: int
    output_offset_ps: Optional[int]


def _wilson(k: int, n: int):
    ci = _st.binomtest(k, n).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass(frozen=True)
class SimSummary:
    """Count accumulators of a run; :meth:`merge` is associative and commutative."""

    cycles: int
    heralded_cycles: int
    herald_clicks: int
    output_clicks: int
    n_ha: int
    n_hb: int
    n_hab: int
    pairs_in_fired_bins: int
    first_fire_counts: tuple
    herald_counts_per_bin: tuple

    def merge(self, other: "SimSummary") -> "SimSummary":
        return SimSummary(
            *(getattr(self, f) + getattr(other, f) for f in _COUNT_FIELDS),
            tuple(a + b for a, b in zip(self.first_fire_counts, other.first_fire_counts)),
            tuple(a + b for a, b in zip(self.herald_counts_per_bin, other.herald_counts_per_bin)),
        )

    @property
    def p_m_hat(self) -> float:
        return self.output_clicks / self.cycles

    @property
    def p_h_hat(self) -> float:
        return self.heralded_cycles / self.cycles

    @property
    def stderr(self) -> float:
        p = self.p_m_hat
        return math.sqrt(p * (1 - p) / self.cycles)

    @property
    def ci95(self):
        return _wilson(self.output_clicks, self.cycles)

    def to_dict(self) -> dict:
        lo, hi = self.ci95
        d = {f: getattr(self, f) for f in _COUNT_FIELDS}
        d.update(
            first_fire_counts=list(self.first_fire_counts),
            herald_counts_per_bin=list(self.herald_counts_per_bin),
            p_m_hat=self.p_m_hat,
            p_m_stderr=self.stderr,
            ci_low=lo,
            ci_high=hi,
            p_h_hat=self.p_h_hat,
        )
        return d


_COUNT_FIELDS = (
    "cycles",
    "heralded_cycles",
    "herald_clicks",
    "output_clicks",
    "n_ha",
    "n_hb",
    "n_hab",
    "pairs_in_fired_bins",
)


@dataclass
class SimResult:
    """Summary plus per-cycle records of the heralded cycles in ``[start, stop)``."""

    config: SimConfig
    start: int
    stop: int
    summary: SimSummary
    fired_cycle: np.ndarray
    fired_bin: np.ndarray
    signal_out: np.ndarray
    fired_pairs: np.ndarray

    @property
    def round_trips(self) -> np.ndarray:
        return self.config.mux.m - self.fired_bin + 1

    def outcome(self, cycle_index: int) -> TrialOutcome:
        if not self.start <= cycle_index < self.stop:
            raise IndexError(cycle_index)
        i = np.searchsorted(self.fired_cycle, cycle_index)
        if i < self.fired_cycle.size and self.fired_cycle[i] == cycle_index:
            j = int(self.fired_bin[i])
            k = self.config.mux.m - j + 1
            return TrialOutcome(cycle_index, j, k, True, int(self.signal_out[i]), k * self.config.mux.delta_tau_ps)
        return TrialOutcome(cycle_index, None, None, False, 0, None)

    def outcomes(self) -> Iterator[TrialOutcome]:
        for c in range(self.start, self.stop):
            yield self.outcome(c)


# -- block sampling -----------------------------------------------------------


def _block_rng(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block, stream))))


def _occupied_positions(rng, length: int, p_occ: float) -> np.ndarray:
    """Indices in ``range(length)`` of independent Bernoulli(``p_occ``) successes."""
    if p_occ <= 0.0:
        return np.empty(0, dtype=np.int64)
    if p_occ >= 1.0:
        return np.arange(length, dtype=np.int64)
    chunks = []
    pos = -1
    while True:
        left = length - 1 - pos
        k = int(left * p_occ + 6 * math.sqrt(left * p_occ + 1) + 16)
        cs = pos + np.cumsum(rng.geometric(p_occ, size=k))
        chunks.append(cs[cs < length])
        if cs[-1] >= length:
            break
        pos = int(cs[-1])
    return np.concatenate(chunks)


@dataclass
class _Block:
    cycle: np.ndarray  # occupied slots, absolute cycle index
    bin: np.ndarray  # 1-based
    pairs: np.ndarray
    herald: np.ndarray  # bool per occupied slot
    stored: np.ndarray  # bool per occupied slot
    survivors: np.ndarray  # signal photons reaching the detector(s)
    arm_a: np.ndarray  # photons routed to SignalA (hbt only)


class _ConditionalSampler:
    """Draws pair numbers conditioned on at least one pair."""

    def __init__(self, stats: PhotonStatistics):
        n_max = max(adaptive_n_max(stats), 1)
        p, _ = pair_number_distribution(stats, n_max)
        self.p_occ = float(1.0 - p[0])
        w = p[1:]
        self.cdf = np.cumsum(w) / w.sum() if w.sum() > 0 else np.ones(n_max)
        self.cdf[-1] = 1.0

    def draw(self, rng, size):
        u = rng.random(size)
        return 1 + np.searchsorted(self.cdf, u, side="right").clip(max=self.cdf.size - 1)


def _simulate_block(cfg: SimConfig, block: int, sampler: _ConditionalSampler) -> _Block:
    m = cfg.mux.m
    rng = _block_rng(cfg.seed, block, _PHOTONS)
    pos = _occupied_positions(rng, BLOCK_CYCLES * m, sampler.p_occ)
    n = sampler.draw(rng, pos.size)
    local_cycle = pos // m
    bins = pos % m + 1
    herald = rng.random(pos.size) < 1.0 - (1.0 - cfg.channels.eta_h) ** n

    hpos = np.flatnonzero(herald)
    stored = np.zeros(pos.size, dtype=bool)
    if hpos.size:
        hc = local_cycle[hpos]
        starts = np.flatnonzero(np.r_[True, hc[1:] != hc[:-1]])
        bits = np.left_shift(np.uint64(1), (bins[hpos] - 1).astype(np.uint64))
        patterns = np.bitwise_or.reduceat(bits, starts)
        chosen = stored_bins_for_patterns(patterns, cfg.mux, cfg.timing)
        keep = chosen > 0
        flat = hc[starts][keep] * m + chosen[keep] - 1
        stored[np.searchsorted(pos, flat)] = True

    trans = np.where(
        stored,
        cfg.channels.eta_s_prime * cfg.channels.eta_rt ** (m - bins + 1),
        cfg.channels.eta_s,
    )
    # stored photons first, so the summary does not depend on pass-through draws
    survivors = np.zeros(pos.size, dtype=np.int64)
    survivors[stored] = rng.binomial(n[stored], trans[stored])
    survivors[~stored] = rng.binomial(n[~stored], trans[~stored])
    arm_a = rng.binomial(survivors, 0.5) if cfg.hbt_split else np.zeros(pos.size, dtype=np.int64)
    return _Block(
        cycle=local_cycle + block * BLOCK_CYCLES,
        bin=bins,
        pairs=n,
        herald=herald,
        stored=stored,
        survivors=survivors,
        arm_a=arm_a,
    )


def _slice(b: _Block, start: int, stop: int) -> _Block:
    lo, hi = np.searchsorted(b.cycle, [start, stop])
    sl = slice(lo, hi)
    return _Block(*(getattr(b, f)[sl] for f in ("cycle", "bin", "pairs", "herald", "stored", "survivors", "arm_a")))


def _block_ranges(start: int, stop: int):
    for block in range(start // BLOCK_CYCLES, (stop - 1) // BLOCK_CYCLES + 1):
        lo = max(start, block * BLOCK_CYCLES)
        hi = min(stop, (block + 1) * BLOCK_CYCLES)
        yield block, lo, hi


def _summarize(cfg: SimConfig, b: _Block, cycles: int):
    m = cfg.mux.m
    st = b.stored
    surv = b.survivors[st]
    a = b.arm_a[st]
    first = np.bincount(b.bin[st] - 1, minlength=m)
    per_bin = np.bincount(b.bin[b.herald] - 1, minlength=m)
    summary = SimSummary(
        cycles=cycles,
        heralded_cycles=int(st.sum()),
        herald_clicks=int(b.herald.sum()),
        output_clicks=int((surv > 0).sum()),
        n_ha=int((a > 0).sum()),
        n_hb=int((surv - a > 0).sum()),
        n_hab=int(((a > 0) & (surv - a > 0)).sum()),
        pairs_in_fired_bins=int(b.pairs[st].sum()),
        first_fire_counts=tuple(int(x) for x in first),
        herald_counts_per_bin=tuple(int(x) for x in per_bin),
    )
    return summary, (b.cycle[st], b.bin[st], surv, b.pairs[st])


def default_threads() -> int:
    try:
        cap = int(os.environ.get("MUXLOOP_THREADS", "0"))
    except ValueError:
        cap = 0
    ncpu = os.cpu_count() or 1
    return max(1, min(cap, ncpu) if cap > 0 else ncpu)


def simulate_range(cfg: SimConfig, start: int, stop: int, threads: Optional[int] = None) -> SimResult:
    """Simulate cycles ``[start, stop)`` of the run described by ``cfg``."""
    if not 0 <= start < stop <= cfg.cycles:
        raise ParameterError(f"cycle range [{start}, {stop}) outside 0..{cfg.cycles}")
    sampler = _ConditionalSampler(cfg.stats)

    def work(item):
        block, lo, hi = item
        return _summarize(cfg, _slice(_simulate_block(cfg, block, sampler), lo, hi), hi - lo)

    items = list(_block_ranges(start, stop))
    threads = threads or default_threads()
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, items))
    else:
        parts = [work(it) for it in items]
    summary = parts[0][0]
    for s, _ in parts[1:]:
        summary = summary.merge(s)
    cols = [np.concatenate([p[1][i] for p in parts]) for i in range(4)]
    return SimResult(cfg, start, stop, summary, *cols)


def simulate_cycles(cfg: SimConfig, threads: Optional[int] = None) -> SimResult:
    """Run every cycle of ``cfg``; see :class:`SimResult` for the outputs."""
    return simulate_range(cfg, 0, cfg.cycles, threads)


def merge_results(results) -> SimResult:
    """Combine shard results covering adjacent cycle ranges (any order)."""
    results = sorted(results, key=lambda r: r.start)
    for a, b in zip(results, results[1:]):
        if a.stop != b.start:
            raise ParameterError("shards must cover adjacent cycle ranges")
    summary = results[0].summary
    for r in results[1:]:
        summary = summary.merge(r.summary)
    cols = [np.concatenate([getattr(r, f) for r in results]) for f in ("fired_cycle", "fired_bin", "signal_out", "fired_pairs")]
    return SimResult(results[0].config, results[0].start, results[-1].stop, summary, *cols)


def herald_bins_by_cycle(cfg: SimConfig, start: int, stop: int) -> dict:
    """Herald-click bins of every cycle in ``[start, stop)`` that saw a herald."""
    sampler = _ConditionalSampler(cfg.stats)
    out = {}
    for block, lo, hi in _block_ranges(start, stop):
        b = _slice(_simulate_block(cfg, block, sampler), lo, hi)
        for c, j in zip(b.cycle[b.herald].tolist(), b.bin[b.herald].tolist()):
            out.setdefault(c, []).append(j)
    return out


def controller_traces(cfg: SimConfig, n_cycles: int) -> list:
    """Controller traces of the first ``n_cycles`` cycles of the run."""
    n_cycles = min(n_cycles, cfg.cycles)
    if n_cycles <= 0:
        return []
    heralds = herald_bins_by_cycle(cfg, 0, n_cycles)
    return [run_cycle(heralds.get(c, ()), cfg.mux, cfg.timing, cycle_index=c) for c in range(n_cycles)]


# -- heralded g2 --------------------------------------------------------------


@dataclass(frozen=True)
class G2Estimate:
    value: float
    stderr: float
    n_h: int
    n_ha: int
    n_hb: int
    n_hab: int
    low_statistics: bool


def g2_from_counts(n_h: int, n_ha: int, n_hb: int, n_hab: int) -> G2Estimate:
    if n_h == 0:
        raise UndefinedEstimateError("no heralded cycles; g2 is undefined")
    if n_ha == 0 or n_hb == 0:
        value = 0.0
    else:
        value = n_hab * n_h / (n_ha * n_hb)
    err = value / math.sqrt(n_hab) if n_hab else math.nan
    low = n_hab < LOW_STATS_TRIPLES
    return G2Estimate(value, err, n_h, n_ha, n_hb, n_hab, low)


def estimate_g2(cfg: SimConfig, threads: Optional[int] = None, result: Optional[SimResult] = None) -> G2Estimate:
    """Heralded g2 from a balanced split of the output, ``N_hab N_h / (N_ha N_hb)``."""
    if not cfg.hbt_split:
        raise ParameterError("g2 estimation needs hbt_split=True")
    s = (result or simulate_cycles(cfg, threads)).summary
    est = g2_from_counts(s.heralded_cycles, s.n_ha, s.n_hb, s.n_hab)
    if est.low_statistics:
        warnings.warn(f"only {est.n_hab} triple coincidences; g2 estimate is low-statistics", stacklevel=2)
    return est


# -- time tags ----------------------------------------------------------------


def _apply_dead_time(ts: np.ndarray, dead_ps: int) -> np.ndarray:
    if dead_ps <= 0 or ts.size < 2 or np.all(np.diff(ts) >= dead_ps):
        return ts
    keep = np.ones(ts.size, dtype=bool)
    last = ts[0]
    for i in range(1, ts.size):
        if ts[i] - last < dead_ps:
            keep[i] = False
        else:
            last = ts[i]
    return ts[keep]


def _block_tags(cfg: SimConfig, block: int, lo: int, hi: int, sampler) -> dict:
    mux = cfg.mux
    b = _simulate_block(cfg, block, sampler)
    t0 = b.cycle * mux.period_ps
    det_lat = round(cfg.detector_latency_ns * 1000)
    out = {}

    def add(role, times, cycles):
        out.setdefault(role, []).append((times, cycles))

    add("Herald", t0[b.herald] + (b.bin[b.herald] - 1) * mux.tau_ps + det_lat, b.cycle[b.herald])
    st = b.stored
    k = mux.m - b.bin + 1
    arrival = np.where(
        st,
        t0 + mux.m * mux.tau_ps + mux.delay_ps + k * mux.delta_tau_ps,
        t0 + (b.bin - 1) * mux.tau_ps + mux.delay_ps,
    )
    if cfg.hbt_split:
        a = b.arm_a > 0
        bb = b.survivors - b.arm_a > 0
        add("SignalA", arrival[a], b.cycle[a])
        add("SignalB", arrival[bb], b.cycle[bb])
    else:
        hit = b.survivors > 0
        add("Signal", arrival[hit], b.cycle[hit])
    add("SwitchCmd", t0[st] + mux.m * mux.tau_ps + mux.delay_ps - cfg.timing.rise_ps, b.cycle[st])

    detectors = ["Herald"] + (["SignalA", "SignalB"] if cfg.hbt_split else ["Signal"])
    if cfg.dark_rate_hz > 0:
        drng = _block_rng(cfg.seed, block, _DARKS)
        span0 = block * BLOCK_CYCLES * mux.period_ps
        span = BLOCK_CYCLES * mux.period_ps
        for role in detectors:
            nd = drng.poisson(cfg.dark_rate_hz * span * 1e-12)
            td = np.sort(drng.integers(0, span, size=nd)) + span0
            add(role, td, td // mux.period_ps)

    merged = {}
    jrng = _block_rng(cfg.seed, block, _JITTER)
    for role in ("Herald", "Signal", "SignalA", "SignalB", "SwitchCmd"):
        if role not in out:
            continue
        times = np.concatenate([t for t, _ in out[role]])
        cyc = np.concatenate([c for _, c in out[role]])
        if cfg.jitter_ps > 0 and role != "SwitchCmd":
            times = times + np.rint(jrng.normal(0.0, cfg.jitter_ps, times.size)).astype(np.int64)
        sel = (cyc >= lo) & (cyc < hi)
        merged[role] = times[sel]
    return merged


def generate_timetags(cfg: SimConfig, start: int = 0, stop: Optional[int] = None) -> TagStream:
    """Time-tag stream of the detectors and release marks for cycles ``[start, stop)``."""
    stop = cfg.cycles if stop is None else stop
    if not 0 <= start < stop <= cfg.cycles:
        raise ParameterError(f"cycle range [{start}, {stop}) outside 0..{cfg.cycles}")
    sampler = _ConditionalSampler(cfg.stats)
    roles = ["Herald"] + (["SignalA", "SignalB"] if cfg.hbt_split else ["Signal"]) + ["SwitchCmd"]
    acc = {r: [] for r in roles}
    for block, lo, hi in _block_ranges(start, stop):
        for role, ts in _block_tags(cfg, block, lo, hi, sampler).items():
            acc[role].append(ts)
    t_begin = start * cfg.mux.period_ps
    t_end = stop * cfg.mux.period_ps
    dead = round(cfg.dead_time_ns * 1000)
    chans = {}
    for role in roles:
        ts = np.sort(np.concatenate(acc[role]) if acc[role] else np.empty(0, np.int64), kind="stable")
        ts = ts[ts >= t_begin]
        if role != "SwitchCmd":
            ts = _apply_dead_time(ts, dead)
        chans[role] = ts.astype(np.int64)
    last = max((int(v[-1]) for v in chans.values() if v.size), default=-1)
    return TagStream(chans, max(t_end, last + 1), meta=cfg.to_dict())
