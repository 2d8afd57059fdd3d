"""Detect-switch-release controller for the storage loop.

The controller is a small automaton driven by one event per laser-clocked
decision point.  All times are integer picoseconds on the switch plane:
bin ``j`` of cycle ``c`` reaches the switch at
``c * period + (j - 1) * tau + delay`` and every event is presented one
rise time earlier, so that the switch has settled when the photon arrives.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .errors import CapacityError, MuxloopError, ParameterError
from .model import MuxConfig

TRACE_HEADER = "#muxloop-trace v1"


class TraceConsistencyError(MuxloopError):
    """An event arrived that the controller cannot accept in its current state."""


class StateKind(str, enum.Enum):
    IDLE = "Idle"
    STORING = "Storing"
    RELEASING = "Releasing"


class FsmState(NamedTuple):
    kind: StateKind = StateKind.IDLE
    remaining: int = 0

    def __str__(self):
        if self.kind is StateKind.STORING:
            return f"Storing({self.remaining})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "FsmState":
        mo = re.fullmatch(r"Storing\((\d+)\)", text)
        if mo:
            return storing(int(mo.group(1)))
        return {StateKind.IDLE: IDLE, StateKind.RELEASING: RELEASING}[StateKind(text)]


IDLE = FsmState()
RELEASING = FsmState(StateKind.RELEASING)


@lru_cache(maxsize=None)
def storing(remaining: int) -> FsmState:
    return FsmState(StateKind.STORING, remaining)


class EventKind(str, enum.Enum):
    HERALD = "HeraldClick"
    LOOP_TICK = "LoopTick"
    OUTPUT_SLOT = "OutputSlot"
    NOOP = "Noop"


class Event(NamedTuple):
    kind: EventKind
    bin: Optional[int] = None

    def __str__(self):
        if self.kind is EventKind.HERALD:
            return f"HeraldClick({self.bin})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "Event":
        mo = re.fullmatch(r"HeraldClick\((\d+)\)", text)
        if mo:
            return herald(int(mo.group(1)))
        return {EventKind.LOOP_TICK: LOOP_TICK, EventKind.OUTPUT_SLOT: OUTPUT_SLOT, EventKind.NOOP: NOOP}[EventKind(text)]


LOOP_TICK = Event(EventKind.LOOP_TICK)
OUTPUT_SLOT = Event(EventKind.OUTPUT_SLOT)
NOOP = Event(EventKind.NOOP)


@lru_cache(maxsize=None)
def herald(j: int) -> Event:
    return Event(EventKind.HERALD, j)


class Action(str, enum.Enum):
    COUPLE_IN = "CoupleIn"
    HOLD_LOOP = "HoldLoop"
    COUPLE_OUT = "CoupleOut"
    REST = "Rest"

    @property
    def cross(self) -> bool:
        """Switch position requested by the action (cross couples the loop)."""
        return self in _CROSS


_CROSS = frozenset((Action.COUPLE_IN, Action.COUPLE_OUT))


class SwitchCommand(NamedTuple):
    action: Action
    at_time_ps: int


@dataclass(frozen=True)
class SwitchTiming:
    """Datasheet limits of the 2x2 switch and the herald-to-switch latency."""

    rise_time_ns: float = 8.0
    short_pulse_ns: float = 80.0
    max_rate_hz: float = 1e6
    latency_ns: float = 150.0

    @property
    def rise_ps(self) -> int:
        return round(self.rise_time_ns * 1000)

    @property
    def short_pulse_ps(self) -> int:
        return round(self.short_pulse_ns * 1000)

    @property
    def latency_ps(self) -> int:
        return round(self.latency_ns * 1000)


DEFAULT_TIMING = SwitchTiming()


class TraceRow(NamedTuple):
    time_ps: int
    event: Event
    state_before: FsmState
    state_after: FsmState
    command: Optional[SwitchCommand]


FsmTrace = list  # list[TraceRow], ordered by time


@lru_cache(maxsize=1 << 14)
def step(state: FsmState, event: Event, m: int):
    """Apply one event; return ``(next_state, action or None)``.

    Raises :class:`TraceConsistencyError` when the event is illegal in
    ``state``, which in a generated trace means a timing bug.  The function is
    pure, so results are memoised.
    """
    kind = event.kind
    if state.kind is StateKind.IDLE:
        if kind is EventKind.HERALD:
            if event.bin is None or not 1 <= event.bin <= m:
                raise TraceConsistencyError(f"herald bin {event.bin} outside 1..{m}")
            return storing(m - event.bin + 1), Action.COUPLE_IN
        if kind is EventKind.OUTPUT_SLOT:
            return state, Action.REST
        return state, None
    if state.kind is StateKind.STORING:
        if kind is EventKind.HERALD or kind is EventKind.NOOP:
            # first-photon policy: later heralds are ignored
            return state, None
        if kind is EventKind.LOOP_TICK:
            if state.remaining <= 1:
                raise TraceConsistencyError(f"loop tick in {state}: photon would overrun the slot")
            return storing(state.remaining - 1), Action.HOLD_LOOP
        if state.remaining != 1:
            raise TraceConsistencyError(f"output slot reached in {state}")
        return RELEASING, Action.COUPLE_OUT
    # Releasing
    if kind is EventKind.NOOP:
        return IDLE, Action.REST
    if kind is EventKind.HERALD:
        return state, None
    raise TraceConsistencyError(f"{event} while releasing")


def _release_width_ps(round_trips: int, cfg: MuxConfig, timing: SwitchTiming) -> int:
    # the late-arriving released photon must pass before the switch leaves cross
    return max(timing.short_pulse_ps, 2 * timing.rise_ps + round_trips * cfg.delta_tau_ps)


def check_timing_closure(cfg: MuxConfig, timing: SwitchTiming = DEFAULT_TIMING) -> None:
    """Raise :class:`ParameterError` if a herald cannot reach the switch in time."""
    if timing.latency_ps > cfg.delay_ps - timing.rise_ps:
        raise ParameterError(
            f"herald latency {timing.latency_ns} ns leaves no room for the "
            f"{timing.rise_time_ns} ns switch edge inside the {cfg.delay_ns} ns delay"
        )


def coupling_margins_ps(cfg: MuxConfig, timing: SwitchTiming = DEFAULT_TIMING) -> np.ndarray:
    """Slack between the herald reaching the controller and the CoupleIn edge, per bin."""
    j = np.arange(1, cfg.m + 1, dtype=np.int64)
    pump = (j - 1) * cfg.tau_ps
    info_ready = pump + timing.latency_ps
    edge = pump + cfg.delay_ps - timing.rise_ps
    return edge - info_ready


class _RowTable(NamedTuple):
    first: tuple  # herald in bin j while idle (index j)
    tick: tuple  # loop tick at bin j while storing (index j)
    late: tuple  # ignored herald in bin j while storing (index j)
    release: tuple  # output slot and settle rows, by stored round trips
    rest: tuple  # output slot of an empty cycle


def _feed(state: FsmState, t: int, event: Event, m: int) -> TraceRow:
    after, action = step(state, event, m)
    return TraceRow(t, event, state, after, None if action is None else SwitchCommand(action, t))


@lru_cache(maxsize=256)
def _row_table(cfg: MuxConfig, timing: SwitchTiming, cycle_index: int) -> _RowTable:
    """Every row a cycle can contain, built from :func:`step`.

    A row depends only on its own bin: once a photon is stored in bin ``j0``
    the loop holds ``Storing(m - j + 2)`` just before bin ``j`` for any
    ``j0 < j``, so traces are concatenations of these shared rows.
    """
    m = cfg.m
    t0 = cycle_index * cfg.period_ps
    times = [None] + [t0 + (j - 1) * cfg.tau_ps + cfg.delay_ps - timing.rise_ps for j in range(1, m + 2)]
    first = [None] + [_feed(IDLE, times[j], herald(j), m) for j in range(1, m + 1)]
    tick = [None, None] + [_feed(storing(m - j + 2), times[j], LOOP_TICK, m) for j in range(2, m + 1)]
    late = [None, None] + [_feed(storing(m - j + 1), times[j], herald(j), m) for j in range(2, m + 1)]
    slot = times[m + 1]
    out = _feed(storing(1), slot, OUTPUT_SLOT, m)
    release = [None] + [
        (out, _feed(RELEASING, slot + _release_width_ps(k, cfg, timing), NOOP, m)) for k in range(1, m + 1)
    ]
    return _RowTable(tuple(first), tuple(tick), tuple(late), tuple(release), (_feed(IDLE, slot, OUTPUT_SLOT, m),))


def run_cycle(
    herald_bins: Iterable[int],
    cfg: MuxConfig,
    timing: SwitchTiming = DEFAULT_TIMING,
    cycle_index: int = 0,
) -> FsmTrace:
    """Drive the controller through one output cycle and return its trace."""
    check_timing_closure(cfg, timing)
    heralds = set(herald_bins)
    m = cfg.m
    if any(not 1 <= j <= m for j in heralds):
        raise ParameterError(f"herald bins {sorted(heralds)} outside 1..{m}")
    table = _row_table(cfg, timing, cycle_index)
    if not heralds:
        return list(table.rest)
    j0 = min(heralds)
    trace = [table.first[j0]]
    append, tick, late = trace.append, table.tick, table.late
    for j in range(j0 + 1, m + 1):
        append(tick[j])
        if j in heralds:
            append(late[j])
    trace.extend(table.release[m - j0 + 1])
    return trace


def stored_bin(trace: FsmTrace) -> Optional[int]:
    """Bin whose photon the trace coupled into the loop, or ``None``."""
    for row in trace:
        if row.command is not None and row.command.action is Action.COUPLE_IN:
            return row.event.bin
    return None


@lru_cache(maxsize=1 << 16)
def _stored_bin_for_pattern(pattern: int, cfg: MuxConfig, timing: SwitchTiming) -> int:
    bins = [j + 1 for j in range(cfg.m) if pattern >> j & 1]
    return stored_bin(run_cycle(bins, cfg, timing)) or 0


def stored_bins_for_patterns(
    patterns: np.ndarray, cfg: MuxConfig, timing: SwitchTiming = DEFAULT_TIMING
) -> np.ndarray:
    """Controller decision for many herald bitmasks (bit ``j-1`` set = herald in bin ``j``).

    Each distinct pattern is run through :func:`run_cycle` once; 0 means no store.
    """
    if cfg.m > 64:
        raise CapacityError("herald bitmasks support at most 64 bins")
    patterns = np.asarray(patterns, dtype=np.uint64)
    uniq, inverse = np.unique(patterns, return_inverse=True)
    decided = np.array([_stored_bin_for_pattern(int(p), cfg, timing) for p in uniq], dtype=np.int64)
    return decided[inverse].reshape(patterns.shape)


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str  # Transition, Order, Incomplete, RiseFall, PulseWidth, Rate, DoubleRelease
    time_ps: int
    detail: str


def validate_trace(
    trace: FsmTrace, cfg: MuxConfig, timing: SwitchTiming = DEFAULT_TIMING
) -> list:
    """Check a trace against the transition relation and the switch datasheet."""
    out = []
    if not trace:
        return out
    if trace[0].state_before != IDLE or trace[-1].state_after != IDLE:
        out.append(Violation("Incomplete", trace[0].time_ps, "trace must start and end in Idle"))
    m = cfg.m
    prev_after = trace[0].state_before
    prev_time = trace[0].time_ps
    releases = []
    edges = []  # physical edges: commands that change the switch position, bar at start
    cross = False
    for row in trace:
        t, event, before, row_after, cmd = row
        if t < prev_time:
            out.append(Violation("Order", t, "events out of time order"))
        if before is not prev_after and before != prev_after:
            out.append(Violation("Transition", t, f"state {before} does not follow {prev_after}"))
        got = None if cmd is None else cmd.action
        try:
            after, action = step(before, event, m)
        except TraceConsistencyError as exc:
            out.append(Violation("Transition", t, str(exc)))
        else:
            if (after is not row_after and after != row_after) or action is not got:
                out.append(
                    Violation(
                        "Transition",
                        t,
                        f"{before} + {event} gives {after}/{action}, trace has {row_after}/{got}",
                    )
                )
        if cmd is not None:
            if got is Action.COUPLE_OUT:
                releases.append(cmd)
            want = got is Action.COUPLE_IN or got is Action.COUPLE_OUT
            if want is not cross:
                cross = want
                edges.append((cmd.at_time_ps, cross))
        prev_after, prev_time = row_after, t

    if len(releases) > 1:
        out.append(Violation("DoubleRelease", releases[1].at_time_ps, f"{len(releases)} CoupleOut commands"))
    rise, pulse = timing.rise_ps, timing.short_pulse_ps
    for (t_a, up), (t_b, _) in zip(edges, edges[1:]):
        if t_b - t_a < rise:
            out.append(Violation("RiseFall", t_b, f"edges {t_b - t_a} ps apart"))
        if up and t_b - t_a < pulse:
            out.append(Violation("PulseWidth", t_b, f"cross pulse {t_b - t_a} ps"))
    pairs = sum(1 for _, up in edges if up)
    allowed = cfg.period_ps * timing.max_rate_hz / 1e12
    if pairs > allowed:
        out.append(Violation("Rate", trace[0].time_ps, f"{pairs} actuations per {cfg.period_ps} ps cycle"))
    return out


# -- pulse picking ------------------------------------------------------------


def pulse_pick_pattern(laser_hz: float, m: int, tau_ns: float, window_ns: float) -> np.ndarray:
    """Mask over the laser pulses in one window selecting ``m`` pulses ``tau`` apart."""
    laser_ps = round(1e12 / laser_hz)
    tau_ps = round(tau_ns * 1000)
    window_ps = round(window_ns * 1000)
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    if tau_ps % laser_ps:
        raise ParameterError(f"bin spacing {tau_ns} ns is not a multiple of the laser period")
    if window_ps % laser_ps:
        raise ParameterError(f"window {window_ns} ns is not a multiple of the laser period")
    if m * tau_ps > window_ps:
        raise CapacityError(f"{m} bins of {tau_ns} ns do not fit a {window_ns} ns window")
    mask = np.zeros(window_ps // laser_ps, dtype=bool)
    mask[np.arange(m) * (tau_ps // laser_ps)] = True
    return mask


def max_clock_hz(m: int, tau_ns: float) -> float:
    """Fastest output clock that still fits ``m`` bins."""
    return 1e12 / (m * round(tau_ns * 1000))


# -- trace files --------------------------------------------------------------


def format_trace(trace: FsmTrace) -> list:
    lines = []
    for r in trace:
        cmd = r.command.action.value if r.command else "-"
        lines.append(f"{r.time_ps}\t{r.event}\t{r.state_before}\t{r.state_after}\t{cmd}")
    return lines


def write_trace(path, traces: Iterable[FsmTrace], comment_lines: Iterable[str] = ()) -> None:
    path = Path(path)
    with path.open("w", newline="\n") as fh:
        fh.write(TRACE_HEADER + "\n")
        for c in comment_lines:
            fh.write(f"# {c}\n")
        for tr in traces:
            for line in format_trace(tr):
                fh.write(line + "\n")


def read_trace(path) -> FsmTrace:
    """Parse a trace file; every row becomes one :class:`TraceRow`."""
    rows = []
    with Path(path).open() as fh:
        first = fh.readline().rstrip("\n")
        if first != TRACE_HEADER:
            raise ValueError(f"{path}:1: expected header {TRACE_HEADER!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            t, ev, before, after, cmd = parts
            t = int(t)
            command = None if cmd == "-" else SwitchCommand(Action(cmd), t)
            rows.append(TraceRow(t, Event.parse(ev), FsmState.parse(before), FsmState.parse(after), command))
    return rows
