"""Command-line entry point: ``muxloop <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import model
from .config import RunConfig, load_config
from .errors import ConfigError, MuxloopError
from .fsm import write_trace
from .sim import controller_traces, generate_timetags, simulate_cycles
from .tags import TagFormatError, analyze, read_channel_map, read_tags, write_tags

RESULT_COLUMNS = ("m", "p_m_model", "p_m_sim", "ci_low", "ci_high", "E", "x_m_hz", "p_h", "herald_rate_hz")
FIGURE_COLUMNS = ("m", "probability", "rate_hz", "model_probability", "model_rate_hz")
TOPOLOGY_COLUMNS = ("m", "loop_avg_passes", "tree_passes", "loop_transmission", "tree_transmission")


class OutputError(MuxloopError):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_csv(path: Path, columns, rows, config_json: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# config: {config_json}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r.get(c)) for c in columns])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def write_json(path: Path, doc) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def model_rows(cfg: RunConfig):
    rows = []
    q = model.herald_click_prob(cfg.stats, cfg.channels.eta_h)
    base = model.multiplexed_coincidence_prob(cfg.stats, cfg.channels, 1)
    for m in range(1, cfg.m_max + 1):
        pm = model.multiplexed_coincidence_prob(cfg.stats, cfg.channels, m)
        ph = model.herald_prob_at_least_one(q, m)
        rows.append(
            {
                "m": m,
                "p_m_model": pm,
                "E": pm / base if base > 0 else None,
                "x_m_hz": cfg.mux.clock_hz * pm,
                "p_h": ph,
                "herald_rate_hz": cfg.mux.clock_hz * ph,
            }
        )
    return rows


def _resolve(args) -> RunConfig:
    return load_config(
        args.config,
        seed=getattr(args, "seed", None),
        cycles=getattr(args, "cycles", None),
        m_max=getattr(args, "m_max", None),
        out=getattr(args, "out", None),
        plot=True if getattr(args, "plot", False) else None,
    )


def cmd_analytic(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output.dir)
    rows = model_rows(cfg)
    write_csv(out / "results.csv", RESULT_COLUMNS, rows, cfg.to_json())
    if "json" in cfg.output.formats:
        write_json(out / "results.json", {"config": cfg.to_dict(), "rows": rows})
    print(f"wrote {out / 'results.csv'} ({len(rows)} rows); E({cfg.m_max}) = {_fmt(rows[-1]['E'])}")
    return 0


def _simulate_sweep(cfg: RunConfig):
    runs = []
    for m in range(1, cfg.m_max + 1):
        scfg = cfg.sim_config(m)
        runs.append((m, scfg, simulate_cycles(scfg)))
    return runs


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    if cfg.sim.cycles < 1:
        raise ConfigError("simulate needs sim.cycles >= 1")
    out = Path(cfg.output.dir)
    rows = model_rows(cfg)
    summaries = []
    for row, (m, scfg, res) in zip(rows, _simulate_sweep(cfg)):
        s = res.summary
        lo, hi = s.ci95
        row.update(p_m_sim=s.p_m_hat, ci_low=lo, ci_high=hi)
        summaries.append({"m": m, "summary": s.to_dict(), "model_p_m": row["p_m_model"]})
        meta = [f"seed: {scfg.seed}", f"m: {m}"]
        if cfg.sim.write_tags:
            stream = generate_timetags(scfg)
            path = out / "tags" / f"tags_m{m:02d}.txt"
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                write_tags(path, stream, meta)
            except OSError as exc:
                raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
        if cfg.sim.trace_cycles:
            path = out / "traces" / f"trace_m{m:02d}.txt"
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                write_trace(path, controller_traces(scfg, cfg.sim.trace_cycles), ["config: " + cfg.to_json(), *meta])
            except OSError as exc:
                raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    write_csv(out / "results.csv", RESULT_COLUMNS, rows, cfg.to_json())
    if "json" in cfg.output.formats:
        write_json(out / "summary.json", {"config": cfg.to_dict(), "runs": summaries})
    print(f"wrote {out / 'results.csv'}: p_m({cfg.m_max}) sim {_fmt(rows[-1]['p_m_sim'])} model {_fmt(rows[-1]['p_m_model'])}")
    return 0


def figure_rows(cfg: RunConfig):
    model_part = model_rows(cfg)
    sims = _simulate_sweep(cfg) if cfg.sim.cycles > 0 else [None] * len(model_part)
    a_rows, b_rows = [], []
    R = cfg.mux.clock_hz
    for row, sim in zip(model_part, sims):
        s = sim[2].summary if sim else None
        a_rows.append(
            {
                "m": row["m"],
                "probability": s.p_m_hat if s else None,
                "rate_hz": R * s.p_m_hat if s else None,
                "model_probability": row["p_m_model"],
                "model_rate_hz": row["x_m_hz"],
            }
        )
        b_rows.append(
            {
                "m": row["m"],
                "probability": s.p_h_hat if s else None,
                "rate_hz": R * s.p_h_hat if s else None,
                "model_probability": row["p_h"],
                "model_rate_hz": row["herald_rate_hz"],
            }
        )
    return a_rows, b_rows


def cmd_reproduce_figure(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output.dir)
    a_rows, b_rows = figure_rows(cfg)
    write_csv(out / "fig2a.csv", FIGURE_COLUMNS, a_rows, cfg.to_json())
    write_csv(out / "fig2b.csv", FIGURE_COLUMNS, b_rows, cfg.to_json())
    written = [out / "fig2a.csv", out / "fig2b.csv"]
    if cfg.output.plot:
        from .plotting import render_figure_pair

        try:
            written += render_figure_pair(a_rows, b_rows, out, cfg.to_json())
        except OSError as exc:
            raise OutputError(f"cannot write figures in {out}: {exc.strerror or exc}") from exc
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def cmd_calibrate(args) -> int:
    cmap = read_channel_map(args.channel_map) if args.channel_map else None
    stream = read_tags(args.tag_file, cmap)
    if len(stream) == 0:
        raise MuxloopError(f"{args.tag_file}: no data after header")
    run = json.loads(json.dumps(stream.meta)) if stream.meta else {}
    mux_doc = run.get("mux", {})
    if args.m is not None:
        mux_doc["m"] = args.m
    mux = model.MuxConfig(**mux_doc)
    rise_ps = round(run.get("timing", {}).get("rise_time_ns", 8.0) * 1000)
    lat_ps = round(run.get("detector_latency_ns", 0.0) * 1000)
    pulse_rate = args.pulse_rate if args.pulse_rate is not None else mux.clock_hz
    summary = analyze(stream, mux, pulse_rate=pulse_rate, window_ps=args.window_ps, detector_latency_ps=lat_ps, rise_ps=rise_ps)
    doc = {"tag_file": str(args.tag_file), "pulse_rate_hz": pulse_rate, "config": run, **summary.to_dict()}
    text = json.dumps(doc, sort_keys=True, indent=2)
    print(text)
    if args.out:
        write_json(Path(args.out) / "calibration.json", doc)
    return 0


def cmd_compare_topologies(args) -> int:
    cfg = _resolve(args)
    loss = args.loss_db if args.loss_db is not None else cfg.channels.loss_db_per_round_trip
    rows = []
    for m in range(1, cfg.m_max + 1):
        t = model.topology_compare(m, loss)
        rows.append(
            {
                "m": m,
                "loop_avg_passes": t.loop_avg_passes,
                "tree_passes": t.tree_passes,
                "loop_transmission": t.loop_avg_transmission,
                "tree_transmission": t.tree_transmission,
            }
        )
    out = Path(cfg.output.dir)
    write_csv(out / "topologies.csv", TOPOLOGY_COLUMNS, rows, cfg.to_json())
    print(f"wrote {out / 'topologies.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="muxloop", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, sim=False):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--m-max", type=int, help="largest bin count of the sweep")
        if sim:
            sp.add_argument("--seed", type=int, help="RNG seed (overrides sim.seed)")
            sp.add_argument("--cycles", type=int, help="output cycles per sweep point")

    s = sub.add_parser("analytic", help="closed-form sweep over m = 1..m_max")
    common(s)
    s.set_defaults(func=cmd_analytic)

    s = sub.add_parser("simulate", help="Monte Carlo sweep plus tag and trace files")
    common(s, sim=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reproduce-figure", help="fig2a.csv/fig2b.csv probability and rate sweeps")
    common(s, sim=True)
    s.add_argument("--plot", action="store_true", help="also render PNG figures (needs matplotlib)")
    s.set_defaults(func=cmd_reproduce_figure)

    s = sub.add_parser("calibrate", help="reduce a tag file to mu, eta_h, eta_s, CAR and g2")
    s.add_argument("tag_file")
    s.add_argument("--pulse-rate", type=float, help="pulses per second per bin (default: output clock)")
    s.add_argument("--channel-map", help="CSV sidecar mapping channel_id to role")
    s.add_argument("--m", type=int, help="bin count, if the file header does not record it")
    s.add_argument("--window-ps", type=int, default=1000)
    s.add_argument("--out", help="directory for calibration.json")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("compare-topologies", help="loop versus log-tree switch passes")
    common(s)
    s.add_argument("--loss-db", type=float, help="loss per switch pass (default: round-trip loss)")
    s.set_defaults(func=cmd_compare_topologies)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"muxloop: {exc}", file=sys.stderr)
        return 2
    except TagFormatError as exc:
        print(f"muxloop: parse error: {exc}", file=sys.stderr)
        return 3
    except (MuxloopError, OSError) as exc:
        print(f"muxloop: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
