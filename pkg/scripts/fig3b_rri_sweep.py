"""AoI against RRI for several traffic densities.

Density follows from the fixed flow and the chosen speed, so each speed
below is one density curve. Also reports the least-squares slope over the
upper RRI range, which should grow as density drops.

    python scripts/fig3b_rri_sweep.py --out results/fig3b
"""

import argparse
import math
from pathlib import Path

import numpy as np

from spsaoi.cli import SWEEP_COLUMNS, cmd_sweep, load_run_config, write_csv


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--speed", type=float, nargs="+", default=[30.0, 60.0, 90.0, 120.0], help="km/h")
    p.add_argument("--step", type=float, default=5.0, help="RRI step, ms")
    p.add_argument("--fit-from", type=float, default=60.0, help="start of the linear fit, ms")
    p.add_argument("--out", type=Path, default=Path("results/fig3b"))
    args = p.parse_args(argv)

    rows = cmd_sweep(load_run_config(), "rri", args.speed, step=args.step)
    path = write_csv(args.out / "rri_sweep.csv", SWEEP_COLUMNS, rows)
    aoi_col = SWEEP_COLUMNS.index("aoi_ms")
    dens_col = SWEEP_COLUMNS.index("density_veh_km")
    for v in args.speed:
        curve = [(r[1], r[aoi_col]) for r in rows if r[0] == v and not math.isnan(r[aoi_col])]
        tail = [(x, y) for x, y in curve if x >= args.fit_from]
        x, y = np.array(tail).T
        slope, icpt = np.polyfit(x, y, 1)
        r2 = 1 - np.sum((y - (slope * x + icpt)) ** 2) / np.sum((y - y.mean()) ** 2)
        density = next(r[dens_col] for r in rows if r[0] == v)
        print(f"speed {v:5g} km/h  density {density:6.1f} veh/km  slope {slope:.4f}  R^2 {r2:.5f}")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
