"""Command line interface.

    ibf-lab <subcommand> [--config file.toml] [--set key=value ...]

Subcommands: model, simulate, psi, lyapunov, volume, dispersion,
image-dispersion, persistence, distance-check, geometry.  Every
experiment writes a JSON report plus CSV rows into the output directory
and exits nonzero unless every pass flag is true.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ibflab import geometry
from ibflab.covmodel import describe
from ibflab.explab import battery, experiments
from ibflab.explab.config import ExperimentConfig, apply_overrides, load_config
from ibflab.explab.report import write_trajectory_csv
from ibflab.explab.svgplot import report_svg
from ibflab.invariant import build_psi_table, monotone_majorant
from ibflab.simcore import StepConfig, simulate_npoints_batch, write_snapshots


def _add_common(p):
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="KEY=VALUE", help="override a configuration value",
    )
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--svg", action="store_true", help="also write an SVG plot")


def _config(args, default: ExperimentConfig | None = None) -> ExperimentConfig:
    if args.config or default is None:
        cfg = load_config(args.config, args.overrides)
    else:
        cfg = apply_overrides(default, args.overrides)
    if args.out:
        cfg.output_dir = args.out
    return cfg


def _emit(report, cfg, args) -> int:
    out = Path(cfg.output_dir)
    stem = report.experiment.replace("/", "-")
    report.write_json(out / f"{stem}.json")
    report.write_csv(out / f"{stem}.csv")
    report.write_data_csv(out / f"{stem}-data.csv")
    if args.svg:
        report_svg(report, out / f"{stem}.svg")
    for line in report.summary_lines():
        print(line)
    print(f"report: {out / (stem + '.json')}")
    return 0 if report.all_passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ibf-lab",
        description="numerical laboratory for isotropic Brownian flows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", help="model parameter summaries")
    msub = p.add_subparsers(dest="action", required=True)
    md = msub.add_parser("describe", help="print derived parameters as JSON")
    _add_common(md)

    p = sub.add_parser("simulate", help="simulate the coupled n-point motion")
    _add_common(p)
    p.add_argument("--binary", action="store_true", help="also write binary snapshots")
    p.add_argument("--n", type=int, help="number of coupled particles")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--T", type=float, help="horizon")
    p.add_argument("--replicates", type=int)
    p.add_argument("--save-times", help="comma-separated save times")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("psi", help="invariant pair-density tools")
    psub = p.add_subparsers(dest="action", required=True)
    pt = psub.add_parser("table", help="emit the tabulated density as CSV")
    _add_common(pt)
    pc = psub.add_parser("check-asymptotics", help="exponent and tail checks")
    _add_common(pc)

    for name in ("lyapunov", "volume", "dispersion", "image-dispersion",
                 "persistence", "distance-check", "quad-variation"):
        _add_common(sub.add_parser(name, help=f"run the {name} experiment"))

    p = sub.add_parser("geometry", help="cylinder kernel machinery")
    gsub = p.add_subparsers(dest="action", required=True)
    gc = gsub.add_parser("cylinder-ratio", help="kernel ratio over a cylinder")
    _add_common(gc)
    gc.add_argument("--L", type=float, default=10.0)
    gc.add_argument("--delta", type=float, default=0.1)
    gc.add_argument("--samples", type=int, default=100_000)
    ge = gsub.add_parser("extract", help="extract slab segments from a polyline")
    _add_common(ge)
    ge.add_argument("--polyline", required=True, help="CSV file, one vertex per row")
    ge.add_argument("--L", type=float, required=True)
    ge.add_argument("--domain-radius", type=float, required=True)

    args = parser.parse_args(argv)

    if args.command == "model":
        cfg = _config(args, ExperimentConfig())
        print(json.dumps(describe(cfg.model()), indent=2, sort_keys=True))
        return 0

    if args.command == "simulate":
        for flag, key in (
            ("n", "run.n_particles"), ("dt", "run.dt"), ("T", "run.horizon"),
            ("replicates", "run.replicates"), ("save_times", "run.save_times"),
            ("seed", "run.master_seed"),
        ):
            value = getattr(args, flag, None)
            if value is not None:
                if flag == "save_times":
                    value = f"[{value}]"
                args.overrides.append(f"{key}={value}")
        cfg = _config(args, ExperimentConfig())
        model = cfg.model()
        init = np.stack([
            experiments._initial_positions(cfg, model, r) for r in range(cfg.replicates)
        ])
        traj = simulate_npoints_batch(
            init, model, StepConfig(dt=cfg.dt, jitter=cfg.jitter, seed=cfg.master_seed),
            cfg.horizon, save_times=list(cfg.save_times),
        )
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trajectory_csv(out / "trajectory.csv", traj.times, traj.positions)
        if args.binary:
            for r in range(traj.positions.shape[0]):
                write_snapshots(out / f"snapshots_{r:04d}.ibf", traj.times, traj.positions[r])
        print(f"wrote {out / 'trajectory.csv'}")
        return 0

    if args.command == "psi":
        cfg = _config(args, battery.psi_config())
        model = cfg.model()
        if args.action == "table":
            table = monotone_majorant(build_psi_table(model))
            out = Path(cfg.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = out / "psi_table.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["s", "psi", "majorant"])
                for s, v, h in zip(table.grid, table.values, table.majorant):
                    writer.writerow([s, v, h])
            print(f"wrote {path}")
            return 0
        report = experiments.run_psi_check(cfg)
        return _emit(report, cfg, args)

    if args.command == "lyapunov":
        cfg = _config(args, battery.lyapunov_config())
        return _emit(experiments.run_lyapunov_suite(cfg), cfg, args)

    if args.command == "volume":
        cfg = _config(args, battery.martingale_config())
        return _emit(experiments.run_martingale_suite(cfg), cfg, args)

    if args.command == "dispersion":
        cfg = _config(args, battery.dispersion_config())
        return _emit(experiments.run_dispersion_forward(cfg), cfg, args)

    if args.command == "image-dispersion":
        cfg = _config(args, battery.image_dispersion_config())
        return _emit(experiments.run_dispersion_image(cfg), cfg, args)

    if args.command == "persistence":
        cfg = _config(args, battery.persistence_config())
        return _emit(experiments.run_persistence_suite(cfg), cfg, args)

    if args.command == "distance-check":
        cfg = _config(args, battery.distance_config())
        return _emit(experiments.run_distance_crosscheck(cfg), cfg, args)

    if args.command == "quad-variation":
        cfg = _config(args, battery.quad_variation_config())
        return _emit(experiments.run_quad_variation(cfg), cfg, args)

    if args.command == "geometry":
        cfg = _config(args, ExperimentConfig(d=2, alpha=0.05, ell=1.0))
        model = cfg.model()
        if args.action == "cylinder-ratio":
            table = monotone_majorant(build_psi_table(model))
            out_ratio = geometry.cylinder_kernel_ratio(
                table.majorant_fn(), L=args.L, delta=args.delta,
                n_samples=args.samples, d=model.d,
                rng=np.random.default_rng(cfg.master_seed),
            )
            payload = {
                "L": args.L, "delta": args.delta, "samples": args.samples,
                "estimate": out_ratio.estimate, "std_error": out_ratio.std_error,
                "line_reference": out_ratio.line_reference,
                "pass": out_ratio.estimate
                <= out_ratio.line_reference + 3 * out_ratio.std_error,
            }
            print(json.dumps(payload, indent=2, sort_keys=True))
            return 0 if payload["pass"] else 1
        verts = np.loadtxt(args.polyline, delimiter=",", ndmin=2)
        poly = [
            geometry.Segment(a=tuple(a), b=tuple(b)) for a, b in zip(verts, verts[1:])
        ]
        domain = geometry.Ball(center=(0.0,) * verts.shape[1], radius=args.domain_radius)
        res = geometry.extract_segments(poly, args.L, domain)
        payload = {
            "n_selected": len(res.segments),
            "segment_length": res.segment_length,
            "total_length": res.segment_length * len(res.segments),
            "length_floor": args.L / 7.0,
            "bar_delta": res.bar_delta,
            "pass": res.segment_length * len(res.segments) >= args.L / 7.0
            and res.bar_delta > 0,
        }
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0 if payload["pass"] else 1

    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
