"""Best-so-far AoI per iteration for GA, DDPG and the LLM loop.

The grid optimum is the reference line. Without ``--endpoint`` the LLM loop
talks to the built-in offline mock; with it, the key is read from the
variable named by ``--key-env``.

    python scripts/fig3c_optimizers.py --out results/fig3c
    LLM_API_KEY=... python scripts/fig3c_optimizers.py --endpoint https://host/v1 --model some-model
"""

import argparse
import csv
import dataclasses
import time
from pathlib import Path

from spsaoi.cli import cmd_optimize, load_run_config


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("results/fig3c"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--methods", nargs="+", default=["grid", "ga", "ddpg", "llm"])
    p.add_argument("--endpoint", help="chat-completions base URL")
    p.add_argument("--model", default=None)
    p.add_argument("--key-env", default="LLM_API_KEY")
    args = p.parse_args(argv)

    cfg = load_run_config(seed=args.seed, output_dir=str(args.out))
    if args.endpoint:
        llm = dataclasses.replace(cfg.llm, base_url=args.endpoint, api_key_env=args.key_env)
        if args.model:
            llm = dataclasses.replace(llm, model_name=args.model)
        cfg = dataclasses.replace(cfg, llm=llm)

    merged = []
    for method in args.methods:
        t0 = time.perf_counter()
        summary = cmd_optimize(cfg, method, mock=not args.endpoint)
        print(
            f"{method:5s} best {summary['best_aoi_ms']:.4f} ms at rri {summary['rri_ms']:.1f}, "
            f"speed {summary['speed_kmh']:.1f}  ({summary['evaluations']} evals, {time.perf_counter() - t0:.1f} s)"
        )
        if method == "grid":
            continue
        with open(args.out / f"trace_{method}.csv") as fh:
            for row in csv.DictReader(fh):
                merged.append({"method": method, **row})

    if merged:
        path = args.out / "convergence.csv"
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(merged[0]))
            w.writeheader()
            w.writerows(merged)
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
