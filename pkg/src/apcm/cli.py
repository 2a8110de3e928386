"""Command line front end.

    apcm run        drive the scenario/method/speed/seed matrix, write CSVs
                    and figures under the output directory
    apcm calibrate  sweep a visibility scale and report the displacement
                    and speed it buys
    apcm bench      time the perspective-map builder and check that worker
                    counts do not change the result
    apcm dump-apcm  write one tick's perspective map in the APCMGRID v1
                    text format

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from apcm import figures
from apcm.config import ConfigError, ExperimentConfig, load_config
from apcm.grid import GridError, OccupancyGrid, dump_grid
from apcm.scenario import (
    FAMILIES,
    ScenarioError,
    aggregate_metrics,
    build_scenario,
    clutter_measure,
    run_episode,
    write_run_csv,
    write_summary_csv,
)
from apcm.visibility import VisibilityError, benchmark_update


def _load(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _episode_kwargs(cfg: ExperimentConfig, workers) -> dict:
    ep = cfg.episode
    return {
        "workers": workers,
        "safety": ep.safety,
        "planner": cfg.planner,
        "max_ticks": ep.max_ticks,
        "sensor_range": ep.sensor_range,
        "v_cap": ep.v_cap,
        "r_coll": ep.r_coll,
    }


def cmd_run(args) -> int:
    cfg = _load(args)
    outdir = Path(args.outdir) if args.outdir else Path(cfg.outdir)
    workers = args.workers if args.workers is not None else cfg.workers
    kwargs = _episode_kwargs(cfg, workers)
    summaries = []
    runs = []
    for family in cfg.scenarios:
        for seed in cfg.seeds:
            spec = build_scenario(family, seed)
            for method in cfg.methods:
                for speed in cfg.speeds:
                    res = run_episode(spec, method, speed, seed, **kwargs)
                    path = (outdir / family / method / f"{speed:g}"
                            / f"seed_{seed}.csv")
                    write_run_csv(res.records, path)
                    summaries.append(res.summary)
                    runs.append((res.summary, res.records))
                    s = res.summary
                    print(f"{family}/{method}/{speed:g}/seed_{seed}: "
                          f"ticks={s['ticks']} v={s['mean_velocity']:.2f} "
                          f"disp={s['mean_displacement']:+.3f} "
                          f"min_d={s['min_distance']:.2f} "
                          f"coll={s['collisions']}")
    write_summary_csv(summaries, outdir / "summary.csv")
    groups = aggregate_metrics(summaries)
    for g in groups:
        print(f"[{g['clutter_label']}/{g['speed']:g}] {g['method']}: "
              f"v={g['mean_velocity']:.2f}+-{g['std_velocity']:.2f} "
              f"disp={g['mean_displacement']:+.3f} "
              f"min_d={g['min_distance']:.2f} coll={g['collisions']}")
    if not args.no_figures:
        figdir = outdir / "figures"
        written = figures.render_timeseries(runs, figdir, "displacement",
                                            "lateral displacement [m]")
        written += figures.render_timeseries(runs, figdir, "v",
                                             "velocity [m/s]")
        written += figures.render_group_bars(groups, figdir)
        print(f"wrote {len(written)} figures under {figdir}")
    print(f"wrote {len(summaries)} runs and summary.csv under {outdir}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    scales = [float(v) for v in args.scales.split(",") if v.strip()]
    if not scales:
        raise ConfigError("no scales given")
    field = {"proposed": "m_proposed", "higgins": "m_higgins",
             "andersen": "lambda_andersen"}[args.method]
    kwargs = _episode_kwargs(cfg, args.workers)
    spec_cache = {seed: build_scenario(args.scenario, seed)
                  for seed in cfg.seeds}
    print(f"calibrating {field} on {args.scenario} at {args.speed:g} m/s, "
          f"seeds {list(cfg.seeds)}, target peak displacement {args.target}")
    best = None
    for scale in scales:
        kwargs["planner"] = replace(cfg.planner, **{field: scale})
        disp, peak, vel, dmin, coll = [], [], [], [], 0
        for seed, spec in spec_cache.items():
            res = run_episode(spec, args.method, args.speed, seed, **kwargs)
            s = res.summary
            disp.append(s["mean_displacement"])
            vel.append(s["mean_velocity"])
            dmin.append(s["min_distance"])
            coll += s["collisions"]
            peak.append(max((abs(r["displacement"]) for r in res.records),
                            default=0.0))
        mean_disp = float(np.mean(disp))
        row = (scale, mean_disp, float(np.mean(peak)), float(np.mean(vel)),
               float(np.min(dmin)), coll)
        print("scale=%g mean_disp=%+.3f peak_disp=%.3f mean_v=%.2f "
              "min_d=%.2f coll=%d" % row)
        miss = abs(row[2] - args.target)
        if best is None or miss < best[0]:
            best = (miss, scale)
    print(f"recommended {field} = {best[1]:g}")
    return 0


def cmd_bench(args) -> int:
    worker_counts = [int(v) for v in args.workers.split(",") if v.strip()]
    digests = []
    slowest = 0.0
    for w in worker_counts:
        r = benchmark_update(grid_n=args.grid, n_sources=args.sources,
                             n_targets=args.targets, repeats=args.repeats,
                             workers=w, seed=args.seed)
        digests.append(r["digest"])
        slowest = max(slowest, r["mean_ms"])
        print(f"workers={w} (resolved {r['workers']}): "
              f"{r['mean_ms']:.1f} ms +- {r['std_ms']:.1f} "
              f"({r['rays_per_s']:.3g} rays/s)")
    agree = len(set(digests)) == 1
    print("worker counts agree bitwise" if agree
          else "WORKER COUNTS DISAGREE")
    if not agree:
        return 1
    if args.limit_ms is not None and slowest > args.limit_ms:
        print(f"slowest mean {slowest:.1f} ms exceeds limit {args.limit_ms} ms")
        return 1
    return 0


def cmd_dump_apcm(args) -> int:
    cfg = _load(args)
    spec = build_scenario(args.scenario, args.seed)
    kwargs = _episode_kwargs(cfg, args.workers)
    kwargs["max_ticks"] = args.tick + 1
    res = run_episode(spec, "proposed", args.speed, args.seed,
                      capture_tick=args.tick, **kwargs)
    if res.merged is None:
        print(f"error: the run ended before tick {args.tick}", file=sys.stderr)
        return 1
    if res.apcm is not None:
        grid = res.apcm.grid
    else:
        # no vantage or threat cells this tick: the map is all zeros
        grid = OccupancyGrid(np.zeros_like(res.merged.values),
                             res.merged.resolution, res.merged.origin,
                             name="apcm")
        print("note: no vantage/threat cells at this tick, dumping zeros")
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        dump_grid(grid, fh)
    print(f"wrote {out}")
    if args.figure:
        fig_path = figures.render_apcm(grid, res.merged,
                                       out.with_suffix(".png"))
        print(f"wrote {fig_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apcm",
        description="Perspective-aware planning scenarios and tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the configured experiment matrix")
    p.add_argument("-c", "--config", help="INI config; defaults when omitted")
    p.add_argument("-o", "--outdir", help="output directory override")
    p.add_argument("--workers", type=int, help="perspective-map worker count")
    p.add_argument("--no-figures", action="store_true",
                   help="skip figure rendering")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate", help="sweep one visibility scale")
    p.add_argument("-c", "--config")
    p.add_argument("--method", choices=("proposed", "higgins", "andersen"),
                   default="proposed")
    p.add_argument("--scenario", choices=FAMILIES, default="single_car")
    p.add_argument("--speed", type=float, default=7.5)
    p.add_argument("--scales", default="25,50,100,200,400")
    p.add_argument("--target", type=float, default=2.0,
                   help="desired peak |displacement| in meters")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench", help="time the perspective-map builder")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--sources", type=int, default=600)
    p.add_argument("--targets", type=int, default=800)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--workers", default="1,4,8",
                   help="comma separated worker counts to compare")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit-ms", type=float,
                   help="fail when the slowest mean exceeds this")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-apcm", help="dump one tick's perspective map")
    p.add_argument("-c", "--config")
    p.add_argument("--scenario", choices=FAMILIES, default="single_car")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speed", type=float, default=7.5)
    p.add_argument("--tick", type=int, required=True)
    p.add_argument("-o", "--output", default="apcm.txt")
    p.add_argument("--figure", action="store_true",
                   help="render the map to a PNG next to the dump")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_dump_apcm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GridError, ScenarioError, VisibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
