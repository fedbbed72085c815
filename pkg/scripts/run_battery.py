"""Run the default experiment battery and collect reports.

Usage: python scripts/run_battery.py [outdir] [--fast]

--fast shrinks replicate counts and horizons for a smoke pass; the full
battery mirrors the acceptance suite and takes ~half an hour on a laptop.
"""

import sys
import time
from pathlib import Path

from ibflab.explab import battery, experiments
from ibflab.explab.config import apply_overrides
from ibflab.explab.svgplot import report_svg


def main():
    args = [a for a in sys.argv[1:] if not a.startswith("--")]
    fast = "--fast" in sys.argv
    out = Path(args[0]) if args else Path("battery_out")
    out.mkdir(parents=True, exist_ok=True)

    jobs = [
        ("lyapunov-d2", experiments.run_lyapunov_suite, battery.lyapunov_config(d=2, alpha=0.0)),
        ("lyapunov-d3", experiments.run_lyapunov_suite, battery.lyapunov_config(d=3, alpha=1.0)),
        ("martingale", experiments.run_martingale_suite, battery.martingale_config()),
        ("persistence", experiments.run_persistence_suite, battery.persistence_config()),
        ("contraction", experiments.run_persistence_suite, battery.contraction_config()),
        ("dispersion", experiments.run_dispersion_forward, battery.dispersion_config()),
        ("image-dispersion", experiments.run_dispersion_image, battery.image_dispersion_config()),
        ("distance-d2a0", experiments.run_distance_crosscheck, battery.distance_config(2, 0.0)),
        ("quad-variation", experiments.run_quad_variation, battery.quad_variation_config()),
        ("psi-a005", experiments.run_psi_check, battery.psi_config(alpha=0.05)),
    ]
    if fast:
        # keep horizons (the checks are asymptotic); shrink replication.
        # the determinant-weighted image statistic is heavy-tailed and needs
        # a little more replication than the rest to stay readable
        jobs = [
            (name, fn, apply_overrides(cfg, [
                "run.replicates=120" if name == "image-dispersion" else "run.replicates=40",
                "run.distance_samples=400",
            ]))
            for name, fn, cfg in jobs
        ]

    all_ok = True
    for name, fn, cfg in jobs:
        t0 = time.perf_counter()
        rep = fn(cfg)
        rep.write_json(out / f"{name}.json")
        rep.write_csv(out / f"{name}.csv")
        report_svg(rep, out / f"{name}.svg")
        status = "ok" if rep.all_passed else "FAILED"
        print(f"{name:>18s}: {status} ({time.perf_counter() - t0:.0f}s)")
        for line in rep.summary_lines():
            print("    " + line)
        all_ok &= rep.all_passed
    print("battery:", "all passed" if all_ok else "FAILURES present")
    return 0 if all_ok else 1


if __name__ == "__main__":
    sys.exit(main())
