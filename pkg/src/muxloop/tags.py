"""Time-tag streams: file format, singles, coincidences, accidentals and g2.

A stream maps a channel role (``Herald``, ``Signal``, ``SignalA``,
``SignalB``, ``SwitchCmd``) to a sorted ``int64`` array of picosecond
timestamps.  ``SwitchCmd`` carries one tag per release command, which marks
the output slot of a heralded cycle.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParameterError, UndefinedEstimateError
from .model import Calibration, MuxConfig, calibrate_mu

TAGS_HEADER = "#muxloop-tags v1"
ROLES = ("Herald", "Signal", "SignalA", "SignalB", "SwitchCmd")
DEFAULT_CHANNEL_MAP = {1: "Herald", 2: "Signal", 3: "SignalA", 4: "SignalB", 5: "SwitchCmd"}
DEFAULT_WINDOW_PS = 1000


class TagFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class EventRecord:
    channel: str
    timestamp_ps: int


@dataclass
class TagStream:
    channels: dict
    duration_ps: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for role, ts in list(self.channels.items()):
            if role not in ROLES:
                raise ParameterError(f"unknown channel role {role!r}")
            ts = np.asarray(ts, dtype=np.int64)
            if ts.size:
                if ts[0] < 0 or np.any(np.diff(ts) < 0):
                    raise ParameterError(f"channel {role} must be sorted and non-negative")
                if ts[-1] >= self.duration_ps:
                    raise ParameterError(f"channel {role} has tags beyond the stream duration")
            self.channels[role] = ts

    def __getitem__(self, role) -> np.ndarray:
        return self.channels.get(role, np.empty(0, dtype=np.int64))

    @property
    def duration_s(self) -> float:
        return self.duration_ps * 1e-12

    def signal_union(self) -> np.ndarray:
        """All output-detector tags, whether or not the output is split."""
        parts = [self[r] for r in ("Signal", "SignalA", "SignalB") if r in self.channels]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts), kind="stable")

    def events(self):
        """Yield :class:`EventRecord` in timestamp order (ties by channel id)."""
        ids = {v: k for k, v in DEFAULT_CHANNEL_MAP.items()}
        roles = sorted(self.channels, key=ids.__getitem__)
        if not roles:
            return
        t = np.concatenate([self.channels[r] for r in roles])
        c = np.concatenate([np.full(self.channels[r].size, i) for i, r in enumerate(roles)])
        order = np.lexsort((c, t))
        for i in order:
            yield EventRecord(roles[c[i]], int(t[i]))

    def __len__(self):
        return sum(v.size for v in self.channels.values())


# -- file format --------------------------------------------------------------


def write_tags(path, stream: TagStream, comment_lines=()) -> None:
    ids = {v: k for k, v in DEFAULT_CHANNEL_MAP.items()}
    roles = sorted(stream.channels, key=ids.__getitem__)
    t = np.concatenate([stream.channels[r] for r in roles]) if roles else np.empty(0, np.int64)
    c = (
        np.concatenate([np.full(stream.channels[r].size, ids[r]) for r in roles])
        if roles
        else np.empty(0, np.int64)
    )
    order = np.lexsort((c, t))
    with Path(path).open("w", newline="\n") as fh:
        fh.write(TAGS_HEADER + "\n")
        fh.write(f"# duration_ps: {stream.duration_ps}\n")
        if stream.meta:
            fh.write("# config: " + json.dumps(stream.meta, sort_keys=True) + "\n")
        for line in comment_lines:
            fh.write(f"# {line}\n")
        fh.write("".join(f"{ci}\t{ti}\n" for ci, ti in zip(c[order].tolist(), t[order].tolist())))


def read_channel_map(path) -> dict:
    """Parse a ``channel_id,role`` CSV sidecar."""
    out = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or row[0].startswith("#") or row[0] == "channel_id":
                continue
            try:
                cid, role = int(row[0]), row[1].strip()
            except (ValueError, IndexError):
                raise ParameterError(f"{path}:{reader.line_num}: expected channel_id,role") from None
            if role not in ROLES:
                raise ParameterError(f"{path}:{reader.line_num}: unknown role {role!r}")
            out[cid] = role
    return out


def read_tags(path, channel_map: Optional[dict] = None) -> TagStream:
    """Load a ``#muxloop-tags v1`` file; errors carry the offending line number."""
    cmap = channel_map or DEFAULT_CHANNEL_MAP
    data = {}
    duration = None
    meta = {}
    with Path(path).open() as fh:
        first = fh.readline().rstrip("\n")
        if first != TAGS_HEADER:
            raise TagFormatError(path, 1, f"missing header {TAGS_HEADER!r}")
        last = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                try:
                    if body.startswith("duration_ps:"):
                        duration = int(body.split(":", 1)[1])
                    elif body.startswith("config:"):
                        meta = json.loads(body.split(":", 1)[1])
                except ValueError as exc:
                    raise TagFormatError(path, lineno, f"bad header comment: {exc}") from None
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TagFormatError(path, lineno, "expected channel_id<TAB>timestamp_ps")
            try:
                cid, t = int(parts[0]), int(parts[1])
            except ValueError:
                raise TagFormatError(path, lineno, f"non-integer field in {line!r}") from None
            if cid not in cmap:
                raise TagFormatError(path, lineno, f"unmapped channel id {cid}")
            if t < 0:
                raise TagFormatError(path, lineno, "negative timestamp")
            if duration is not None and t >= duration:
                raise TagFormatError(path, lineno, f"timestamp beyond the declared {duration} ps")
            role = cmap[cid]
            if t < last.get(role, 0):
                raise TagFormatError(path, lineno, f"timestamps of {role} decrease")
            last[role] = t
            data.setdefault(role, []).append(t)
    chans = {r: np.asarray(v, dtype=np.int64) for r, v in data.items()}
    if duration is None:
        duration = max((int(v[-1]) + 1 for v in chans.values() if v.size), default=0)
    return TagStream(chans, duration, meta)


# -- counting -----------------------------------------------------------------


def count_singles(stream: TagStream, channel: str):
    """Return ``(count, rate_hz)`` for one channel."""
    if stream.duration_ps <= 0:
        raise ParameterError("stream duration must be > 0")
    n = int(stream[channel].size)
    return n, n / stream.duration_s


@dataclass(frozen=True)
class CoincidenceWindow:
    """Symmetric window of total ``width_ps``; ``delays_ps[role]`` is subtracted first."""

    width_ps: int = DEFAULT_WINDOW_PS
    delays_ps: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.width_ps <= 0:
            raise ParameterError(f"window width must be > 0, got {self.width_ps}")

    def check_against(self, tau_ps: int) -> None:
        if self.width_ps >= tau_ps:
            raise ParameterError(f"window {self.width_ps} ps is not below the bin spacing {tau_ps} ps")

    def shifted(self, role: str, extra_ps: int) -> "CoincidenceWindow":
        d = dict(self.delays_ps)
        d[role] = d.get(role, 0) + extra_ps
        return CoincidenceWindow(self.width_ps, d)


@dataclass(frozen=True)
class Coincidences:
    count: int
    pairs: np.ndarray  # (count, 2) indices into the two channel arrays


def _window_bounds(h, s, half):
    lo = np.searchsorted(s, h - half, side="left")
    hi = np.searchsorted(s, h + half, side="right")
    return lo, hi


def match_times(h: np.ndarray, s: np.ndarray, width_ps: int) -> np.ndarray:
    """Greedy earliest-first one-to-one matching of sorted ``h`` to sorted ``s``.

    Pairs satisfy ``2 * |s - h| <= width_ps``.  With a common window width the
    greedy choice yields a maximum matching.
    """
    half = width_ps // 2
    lo, hi = _window_bounds(h, s, half)
    cand = np.flatnonzero(hi > lo)
    pairs = []
    ptr = 0
    for i, a, b in zip(cand.tolist(), lo[cand].tolist(), hi[cand].tolist()):
        pick = a if a > ptr else ptr
        if pick < b:
            pairs.append((i, pick))
            ptr = pick + 1
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def count_coincidences(stream: TagStream, herald_ch: str, signal_ch: str, window: CoincidenceWindow) -> Coincidences:
    h = _delayed(stream, herald_ch, window)
    s = _delayed(stream, signal_ch, window)
    pairs = match_times(h, s, window.width_ps)
    return Coincidences(len(pairs), pairs)


def _delayed(stream, role, window):
    arr = stream.signal_union() if role == "Signal*" else stream[role]
    return arr - window.delays_ps.get(role, 0)


@dataclass(frozen=True)
class AccidentalsResult:
    coincidences: int
    accidentals: int
    accidental_rate_hz: float
    car: float
    car_infinite: bool


def accidentals_and_car(
    stream: TagStream,
    herald_ch: str,
    signal_ch: str,
    window: CoincidenceWindow,
    period_ps: int,
    offset_multiple: int = 1,
) -> AccidentalsResult:
    """Accidentals from the window shifted by whole output periods, and the CAR."""
    if offset_multiple == 0:
        raise ParameterError("offset_multiple must be non-zero")
    c = count_coincidences(stream, herald_ch, signal_ch, window).count
    acc = count_coincidences(
        stream, herald_ch, signal_ch, window.shifted(signal_ch, offset_multiple * period_ps)
    ).count
    rate = acc / stream.duration_s if stream.duration_ps > 0 else 0.0
    if acc == 0:
        return AccidentalsResult(c, 0, rate, math.inf, True)
    return AccidentalsResult(c, acc, rate, c / acc, False)


@dataclass(frozen=True)
class HeraldedG2:
    n_h: int
    n_ha: int
    n_hb: int
    n_hab: int

    @property
    def value(self) -> float:
        if self.n_h == 0:
            raise UndefinedEstimateError("no heralds")
        if self.n_ha == 0 or self.n_hb == 0:
            return 0.0 if self.n_hab == 0 else math.inf
        return self.n_hab * self.n_h / (self.n_ha * self.n_hb)

    @property
    def stderr(self) -> float:
        # Poisson error on the triple count dominates
        v = self.value
        return v / math.sqrt(self.n_hab) if self.n_hab else math.nan


def heralded_g2_counts(
    stream: TagStream, trigger_ch: str, a_ch: str, b_ch: str, window: CoincidenceWindow
) -> HeraldedG2:
    """Trigger-conditioned singles and doubles on the two arms of a splitter."""
    h = _delayed(stream, trigger_ch, window)
    half = window.width_ps // 2
    hits = []
    for arm in (a_ch, b_ch):
        lo, hi = _window_bounds(h, _delayed(stream, arm, window), half)
        hits.append(hi > lo)
    ha, hb = hits
    return HeraldedG2(int(h.size), int(ha.sum()), int(hb.sum()), int((ha & hb).sum()))


def herald_bin_histogram(stream: TagStream, mux: MuxConfig, detector_latency_ps: int = 0):
    """Per-bin herald counts: ``(all_clicks, first_click_per_cycle)``."""
    t = stream["Herald"] - detector_latency_ps
    cyc = t // mux.period_ps
    offset = t - cyc * mux.period_ps
    j = np.rint(offset / mux.tau_ps).astype(np.int64)
    ok = (j >= 0) & (j < mux.m) & (np.abs(offset - j * mux.tau_ps) * 2 < mux.tau_ps)
    cyc, j = cyc[ok], j[ok]
    all_counts = np.bincount(j, minlength=mux.m)
    order = np.lexsort((j, cyc))
    _, first = np.unique(cyc[order], return_index=True)
    first_counts = np.bincount(j[order][first], minlength=mux.m)
    return all_counts, first_counts


# -- end-to-end reduction -----------------------------------------------------


@dataclass
class CountsSummary:
    duration_s: float
    singles: dict
    coincidences: Optional[int]
    coincidence_rate_hz: Optional[float]
    accidentals: Optional[int]
    car: Optional[float]
    car_infinite: bool
    heralded_output: int
    heralded_output_rate_hz: float
    calibration: Optional[Calibration]
    g2: Optional[HeraldedG2] = None
    herald_histogram: Optional[list] = None
    first_herald_histogram: Optional[list] = None

    @property
    def mu_estimate(self):
        return self.calibration.mu if self.calibration else None

    @property
    def eta_h_estimate(self):
        return self.calibration.eta_h if self.calibration else None

    @property
    def eta_s_estimate(self):
        return self.calibration.eta_s if self.calibration else None

    def to_dict(self) -> dict:
        g2 = None
        if self.g2 is not None and self.g2.n_h:
            g2 = {
                "value": self.g2.value,
                "stderr": self.g2.stderr,
                "n_h": self.g2.n_h,
                "n_ha": self.g2.n_ha,
                "n_hb": self.g2.n_hb,
                "n_hab": self.g2.n_hab,
            }
        return {
            "duration_s": self.duration_s,
            "singles": {k: {"count": c, "rate_hz": r} for k, (c, r) in self.singles.items()},
            "coincidences": self.coincidences,
            "coincidence_rate_hz": self.coincidence_rate_hz,
            "accidentals": self.accidentals,
            "car": None if self.car_infinite else self.car,
            "car_infinite": self.car_infinite,
            "heralded_output": self.heralded_output,
            "heralded_output_rate_hz": self.heralded_output_rate_hz,
            "mu": self.mu_estimate,
            "eta_h": self.eta_h_estimate,
            "eta_s": self.eta_s_estimate,
            "g2": g2,
            "herald_histogram": self.herald_histogram,
            "first_herald_histogram": self.first_herald_histogram,
        }


def output_window(mux: MuxConfig, rise_ps: int, width_ps: int = DEFAULT_WINDOW_PS) -> CoincidenceWindow:
    """Window pairing release marks with released photons of any storage time."""
    spread = (mux.m - 1) * mux.delta_tau_ps
    center = rise_ps + (mux.m + 1) * mux.delta_tau_ps // 2
    return CoincidenceWindow(width_ps + spread, {"Signal*": center, "SignalA": center, "SignalB": center})


def analyze(
    stream: TagStream,
    mux: MuxConfig,
    pulse_rate: Optional[float] = None,
    window_ps: int = DEFAULT_WINDOW_PS,
    detector_latency_ps: int = 0,
    rise_ps: int = 8000,
) -> CountsSummary:
    """Reduce a stream to singles, coincidences, CAR, calibration and g2.

    The herald/signal calibration needs a single-bin run (``mux.m == 1``),
    where every herald stores its photon for exactly one round trip.
    """
    if stream.duration_ps <= 0:
        raise ParameterError("stream duration must be > 0")
    pulse_rate = mux.clock_hz if pulse_rate is None else pulse_rate
    singles = {r: count_singles(stream, r) for r in stream.channels}
    if "Signal" not in singles and ("SignalA" in singles or "SignalB" in singles):
        n = int(stream.signal_union().size)
        singles["Signal"] = (n, n / stream.duration_s)

    out_win = output_window(mux, rise_ps, window_ps)
    out_win.check_against(mux.tau_ps)
    released = count_coincidences(stream, "SwitchCmd", "Signal*", out_win).count

    c = acc = car = calib = None
    car_inf = False
    if mux.m == 1:
        delay = mux.tau_ps + mux.delay_ps + mux.delta_tau_ps - detector_latency_ps
        win = CoincidenceWindow(window_ps, {"Signal*": delay})
        win.check_against(mux.tau_ps)
        res = accidentals_and_car(stream, "Herald", "Signal*", win, mux.period_ps)
        c, acc, car, car_inf = res.coincidences, res.accidentals, res.car, res.car_infinite
        calib = calibrate_mu(
            c / stream.duration_s, singles.get("Herald", (0, 0.0))[1], singles["Signal"][1] if "Signal" in singles else 0.0,
            pulse_rate,
        )

    g2 = None
    if "SignalA" in stream.channels or "SignalB" in stream.channels:
        g2 = heralded_g2_counts(stream, "SwitchCmd", "SignalA", "SignalB", out_win)

    all_h, first_h = herald_bin_histogram(stream, mux, detector_latency_ps)
    return CountsSummary(
        duration_s=stream.duration_s,
        singles=singles,
        coincidences=c,
        coincidence_rate_hz=None if c is None else c / stream.duration_s,
        accidentals=acc,
        car=car,
        car_infinite=car_inf,
        heralded_output=released,
        heralded_output_rate_hz=released / stream.duration_s,
        calibration=calib,
        g2=g2,
        herald_histogram=all_h.tolist(),
        first_herald_histogram=first_h.tolist(),
    )
