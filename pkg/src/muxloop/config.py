"""JSON run configuration with a strict schema.

Every section is optional; omitted values fall back to the measured
parameters of the 11-bin fibre-loop source.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import jsonschema

from .errors import ConfigError, MuxloopError
from .fsm import SwitchTiming
from .model import ChannelModel, MuxConfig, PhotonStatistics
from .sim import SimConfig

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_unit = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}


def _section(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "muxloop run configuration",
    **_section(
        {
            "stats": _section({"law": {"enum": ["thermal", "poisson"]}, "mu": _nonneg}),
            "channels": _section(
                {
                    "eta_h": _unit,
                    "eta_s_prime": _unit,
                    "loss_db_per_round_trip": _nonneg,
                    "switch_loss_db": _nonneg,
                    "loop_loss_db": _nonneg,
                }
            ),
            "mux": _section(
                {
                    "m": {"type": "integer", "minimum": 1, "maximum": 64},
                    "tau_ns": _pos,
                    "clock_hz": _pos,
                    "delta_tau_ns": _nonneg,
                    "delay_ns": _pos,
                    "coherence_ps": _pos,
                    "laser_hz": _pos,
                }
            ),
            "switch": _section(
                {"rise_time_ns": _pos, "short_pulse_ns": _pos, "max_rate_hz": _pos, "latency_ns": _nonneg}
            ),
            "sim": _section(
                {
                    "cycles": {"type": "integer", "minimum": 0},
                    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                    "dead_time_ns": _nonneg,
                    "dark_rate_hz": _nonneg,
                    "hbt_split": {"type": "boolean"},
                    "jitter_ps": _nonneg,
                    "detector_latency_ns": _nonneg,
                    "trace_cycles": {"type": "integer", "minimum": 0},
                    "write_tags": {"type": "boolean"},
                }
            ),
            "m_max": {"type": "integer", "minimum": 1, "maximum": 64},
            "output": _section(
                {
                    "dir": {"type": "string"},
                    "formats": {"type": "array", "items": {"enum": ["csv", "json"]}, "uniqueItems": True},
                    "plot": {"type": "boolean"},
                }
            ),
        }
    ),
}


@dataclass(frozen=True)
class SimOptions:
    cycles: int = 1_000_000
    seed: int = 0
    dead_time_ns: float = 0.0
    dark_rate_hz: float = 0.0
    hbt_split: bool = False
    jitter_ps: float = 0.0
    detector_latency_ns: float = 0.0
    trace_cycles: int = 100
    write_tags: bool = True


@dataclass(frozen=True)
class OutputOptions:
    dir: str = "muxloop-out"
    formats: tuple = ("csv", "json")
    plot: bool = False


@dataclass(frozen=True)
class RunConfig:
    stats: PhotonStatistics = field(default_factory=PhotonStatistics)
    channels: ChannelModel = field(default_factory=ChannelModel)
    mux: MuxConfig = field(default_factory=MuxConfig)
    switch: SwitchTiming = field(default_factory=SwitchTiming)
    sim: SimOptions = field(default_factory=SimOptions)
    m_max: int = 11
    output: OutputOptions = field(default_factory=OutputOptions)

    def mux_for(self, m: int) -> MuxConfig:
        return replace(self.mux, m=m)

    def sim_config(self, m: int) -> SimConfig:
        s = self.sim
        return SimConfig(
            cycles=s.cycles,
            seed=s.seed,
            stats=self.stats,
            channels=self.channels,
            mux=self.mux_for(m),
            dead_time_ns=s.dead_time_ns,
            dark_rate_hz=s.dark_rate_hz,
            hbt_split=s.hbt_split,
            jitter_ps=s.jitter_ps,
            detector_latency_ns=s.detector_latency_ns,
            timing=self.switch,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stats"]["law"] = self.stats.law.value
        d["output"]["formats"] = list(self.output.formats)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def validate_document(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration:\n" + "\n".join(lines))


def from_document(doc: dict) -> RunConfig:
    """Build a :class:`RunConfig` from an already-parsed JSON document."""
    validate_document(doc)
    ch = dict(doc.get("channels", {}))
    if "switch_loss_db" in ch or "loop_loss_db" in ch:
        if "loss_db_per_round_trip" in ch:
            raise ConfigError("give either loss_db_per_round_trip or switch/loop losses, not both")
        ch["loss_db_per_round_trip"] = ch.pop("switch_loss_db", 0.0) + ch.pop("loop_loss_db", 0.0)
    out = dict(doc.get("output", {}))
    if "formats" in out:
        out["formats"] = tuple(out["formats"])
    try:
        mux = MuxConfig(**doc.get("mux", {}))
        cfg = RunConfig(
            stats=PhotonStatistics(**doc.get("stats", {})),
            channels=ChannelModel(**ch),
            mux=mux,
            switch=SwitchTiming(**doc.get("switch", {})),
            sim=SimOptions(**doc.get("sim", {})),
            m_max=doc.get("m_max", mux.m),
            output=OutputOptions(**out),
        )
        cfg.mux_for(cfg.m_max)  # the largest sweep point must fit the cycle
    except MuxloopError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def load_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """Read ``path`` (or use defaults) and apply command-line overrides."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("seed", "cycles"):
            doc.setdefault("sim", {})[key] = value
        elif key == "m_max":
            doc["m_max"] = value
        elif key == "out":
            doc.setdefault("output", {})["dir"] = value
        elif key == "plot":
            doc.setdefault("output", {})["plot"] = value
        else:
            raise ConfigError(f"unknown override {key!r}")
    return from_document(doc)
