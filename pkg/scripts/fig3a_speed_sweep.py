"""AoI against vehicle speed for several RRIs.

Writes ``speed_sweep.csv`` (one row per speed and RRI) and prints a compact
table. Plot ``aoi_ms`` against ``speed_kmh`` grouped by ``rri_ms``.

    python scripts/fig3a_speed_sweep.py --out results/fig3a
"""

import argparse
import math
from pathlib import Path

from spsaoi.cli import SWEEP_COLUMNS, cmd_sweep, load_run_config, write_csv


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rri", type=float, nargs="+", default=[20.0, 50.0, 100.0], help="ms")
    p.add_argument("--step", type=float, default=5.0, help="speed step, km/h")
    p.add_argument("--out", type=Path, default=Path("results/fig3a"))
    args = p.parse_args(argv)

    rows = cmd_sweep(load_run_config(), "speed", args.rri, step=args.step)
    path = write_csv(args.out / "speed_sweep.csv", SWEEP_COLUMNS, rows)
    aoi_col = SWEEP_COLUMNS.index("aoi_ms")
    speeds = sorted({r[0] for r in rows})
    table = {(r[1], r[0]): r[aoi_col] for r in rows}
    print("speed  " + "  ".join(f"rri={r:>5g}" for r in args.rri))
    for v in speeds:
        cells = [table[(r, v)] for r in args.rri]
        print(f"{v:5g}  " + "  ".join(f"{c:9.3f}" if not math.isnan(c) else "      n/a" for c in cells))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
