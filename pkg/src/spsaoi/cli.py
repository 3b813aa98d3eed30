"""Command-line interface.

Subcommands: ``eval``, ``sweep``, ``optimize``, ``train``, ``validate-mc``
and ``show-config``. Configuration is one JSON file whose top-level keys
mirror :class:`RunConfig`; command-line flags override it.

Exit codes: 0 success, 1 other model error, 2 invalid configuration or
infeasible decision, 3 language-model endpoint failure, 4 Monte Carlo gate
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, FeasibilityError, ResourceExhaustionError, SpsAoiError
from .llmopt import ConvergenceRule, LlmEndpointConfig, NeighborhoodMock, llm_optimize
from .model import (
    CSV_COLUMNS,
    ChannelConfig,
    Decision,
    RadioConfig,
    ScenarioConfig,
    aoi,
    config_dict,
    density_from_speed,
    extra_collision_delay,
    frame_failure_probabilities,
    markov_channel,
    stationary_weights,
)
from .optimize import GaConfig, Objective, SearchSpace, ga_optimize, grid_search
from .rl import DdpgConfig, RewardConfig, train
from .simval import McConfig, mc_extra_delay, mc_gilbert

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ENDPOINT, EXIT_MC_GATE = 0, 1, 2, 3, 4

SWEEP_COLUMNS = CSV_COLUMNS + ("fixed_param", "infeasible")
MC_TOLERANCE = 0.01
MC_COLLISION_PROBS = (0.1, 0.5, 0.9)
MC_RRI = 20.0  # ms
MC_SPEEDS = (30.0, 75.0, 120.0)  # km/h


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    radio: RadioConfig = field(default_factory=RadioConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    search: SearchSpace = field(default_factory=SearchSpace)
    ga: GaConfig = field(default_factory=GaConfig)
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)
    llm: LlmEndpointConfig = field(default_factory=LlmEndpointConfig)
    convergence: ConvergenceRule = field(default_factory=ConvergenceRule)
    mc: McConfig = field(default_factory=McConfig)
    output_dir: str = "runs"
    seed: int | None = None  # overrides every component seed when set

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "search":
                value = {"rri_step": value.rri_step, "speed_step": value.speed_step}
            elif dataclasses.is_dataclass(value):
                value = config_dict(value)
            out[f.name] = value
        return out


_SECTIONS = {
    "scenario": ScenarioConfig,
    "channel": ChannelConfig,
    "radio": RadioConfig,
    "reward": RewardConfig,
    "ga": GaConfig,
    "ddpg": DdpgConfig,
    "llm": LlmEndpointConfig,
    "convergence": ConvergenceRule,
    "mc": McConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(data: dict | None = None, *, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    """Merge a JSON mapping over the defaults, then apply flag overrides."""
    data = dict(data or {})
    known = set(_SECTIONS) | {"search", "output_dir", "seed"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    parts = {name: _build(cls, data[name], name) for name, cls in _SECTIONS.items() if name in data}
    scenario = parts.get("scenario", ScenarioConfig())
    parts["scenario"] = scenario
    search = data.get("search", {})
    parts["search"] = _build(SearchSpace, {**search, "scenario": scenario}, "search")
    if seed is None:
        seed = data.get("seed")
    if seed is not None:
        if int(seed) != seed or not (0 <= seed < 2**64):
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
        seed = int(seed)
        parts["ga"] = dataclasses.replace(parts.get("ga", GaConfig()), seed=seed)
        parts["ddpg"] = dataclasses.replace(parts.get("ddpg", DdpgConfig()), seed=seed)
        parts["mc"] = dataclasses.replace(parts.get("mc", McConfig()), seed=seed)
    out_dir = output_dir if output_dir is not None else data.get("output_dir", "runs")
    return RunConfig(**parts, output_dir=str(out_dir), seed=seed)


def _objective(cfg: RunConfig, keep_log: bool = False) -> Objective:
    return Objective(cfg.scenario, cfg.channel, cfg.radio, keep_log=keep_log)


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# -- commands ------------------------------------------------------------------


def cmd_eval(cfg: RunConfig, speed: float, rri: float) -> dict:
    b = aoi(Decision(speed, rri), cfg.scenario, cfg.channel, cfg.radio)
    return b.to_dict()


def _sweep_row(cfg: RunConfig, speed: float, rri: float, fixed: str) -> list:
    try:
        return aoi(Decision(speed, rri), cfg.scenario, cfg.channel, cfg.radio).to_row() + [fixed, 0]
    except (FeasibilityError, ResourceExhaustionError):
        nan = float("nan")
        density = density_from_speed(cfg.scenario.flow_q, speed)
        return [speed, rri, density] + [nan] * (len(CSV_COLUMNS) - 3) + [fixed, 1]


def sweep_values(lo: float, hi: float, step: float) -> list[float]:
    n = int(math.floor((hi - lo) / step + 1e-9))
    pts = [lo + k * step for k in range(n + 1)]
    if hi - pts[-1] > 1e-9:
        pts.append(hi)
    return pts


def cmd_sweep(
    cfg: RunConfig,
    vary: str,
    fixed_list: list[float] | None = None,
    values: list[float] | None = None,
    step: float | None = None,
) -> list[list]:
    """Rows of the breakdown for every (fixed value, varied value) pair.

    Infeasible points are kept, flagged with ``infeasible = 1``.
    """
    if vary == "speed":
        fixed_list = fixed_list or [20.0, 50.0, 100.0]
        lo, hi = cfg.scenario.speed_bounds
        values = values or sweep_values(lo, hi, step or 5.0)
        return [_sweep_row(cfg, v, r, "rri_ms") for r in fixed_list for v in values]
    if vary == "rri":
        fixed_list = fixed_list or [30.0, 60.0, 90.0, 120.0]
        lo, hi = cfg.scenario.rri_bounds
        values = values or sweep_values(lo, hi, step or 5.0)
        return [_sweep_row(cfg, v, r, "speed_kmh") for v in fixed_list for r in values]
    raise ConfigError(f"vary must be 'speed' or 'rri', got {vary!r}")


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def cmd_optimize(
    cfg: RunConfig,
    method: str,
    *,
    mock: bool = False,
    checkpoint: str | Path | None = None,
    objective: Objective | None = None,
    llm_client=None,
) -> dict:
    """Run one optimizer; writes trace CSV and summary JSON under ``output_dir``."""
    out = Path(cfg.output_dir)
    objective = objective or _objective(cfg)
    start = time.perf_counter()
    if method == "grid":
        best, trace = grid_search(cfg.search, objective)
    elif method == "ga":
        best, trace = ga_optimize(cfg.search, cfg.ga, objective)
    elif method == "ddpg":
        policy, trace = train(cfg.ddpg, cfg.reward, objective=objective)
        best = trace.iterations[-1]
        policy.save(checkpoint or out / "policy_ddpg.json")
    elif method == "llm":
        client, key = llm_client, None
        if mock:
            client = client or NeighborhoodMock(seed=cfg.ga.seed if cfg.seed is None else cfg.seed).client()
            key = "mock"
        best, trace, _ = llm_optimize(
            objective,
            cfg.llm,
            cfg.convergence,
            client=client,
            api_key=key,
            run_dir=out / "llm_prompts",
        )
    else:
        raise ConfigError(f"unknown method {method!r}")
    wall = time.perf_counter() - start
    if method == "ddpg":
        # The greedy policy's last evaluation, not the best seen during training.
        aoi_value, decision = best.current_aoi, best.decision
    else:
        aoi_value, decision = best.aoi, best.decision
    summary = {
        "method": method,
        "best_aoi_ms": aoi_value,
        "speed_kmh": decision.speed,
        "rri_ms": decision.rri,
        "evaluations": trace.evaluations,
        "wall_time_s": wall,
        "status": trace.status,
    }
    trace.to_csv(out / f"trace_{method}.csv")
    _write_json(out / f"summary_{method}.json", summary)
    return summary


def cmd_validate_mc(cfg: RunConfig, samples: int | None = None, seed: int | None = None) -> list[dict]:
    """Analytic values against Monte Carlo estimates, one entry per quantity."""
    mc = McConfig(
        samples=cfg.mc.samples if samples is None else samples,
        seed=cfg.mc.seed if seed is None else seed,
    )
    report = []

    def add(quantity, analytic, estimate):
        rel = abs(estimate - analytic) / abs(analytic) if analytic else abs(estimate)
        report.append(
            {
                "quantity": quantity,
                "analytic": analytic,
                "monte_carlo": estimate,
                "rel_err": rel,
                "tolerance": MC_TOLERANCE,
                "passed": bool(rel < MC_TOLERANCE),
                "samples": mc.samples,
                "seed": mc.seed,
            }
        )

    for p in MC_COLLISION_PROBS:
        add(f"extra_delay[p_coll={p:g}]", float(extra_collision_delay(MC_RRI, p)), mc_extra_delay(MC_RRI, p, mc))
    frames = cfg.channel.frames_per_packet
    for v in MC_SPEEDS:
        ch = markov_channel(v, cfg.channel)
        stationary, first = mc_gilbert(ch, frames, mc)
        add(f"stationary_adverse[speed={v:g}]", stationary_weights(ch)[0], stationary)
        add(f"first_failure[speed={v:g}]", frame_failure_probabilities(ch.stay_ideal, frames)[-1], first)
    return report


# -- argument parsing ------------------------------------------------------------


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("--seed", type=_u64, help="seed for every stochastic component")
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--mock", action="store_true", help="use the offline LLM endpoint")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="spsaoi", description="AoI model and optimizers for SPS vehicular networks")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eval", parents=[common], help="evaluate one (speed, RRI) decision")
    e.add_argument("--speed", type=float, required=True, help="km/h")
    e.add_argument("--rri", type=float, required=True, help="ms")

    s = sub.add_parser("sweep", parents=[common], help="write a parameter sweep CSV")
    s.add_argument("--vary", choices=("speed", "rri"), required=True)
    s.add_argument("--fixed", type=float, nargs="+", help="values of the other parameter")
    s.add_argument("--values", type=float, nargs="+", help="explicit values of the varied parameter")
    s.add_argument("--step", type=float, help="step of the varied parameter (default 5)")

    o = sub.add_parser("optimize", parents=[common], help="run one optimizer")
    o.add_argument("--method", choices=("grid", "ga", "ddpg", "llm"), required=True)
    o.add_argument("--checkpoint", type=Path, help="policy file for ddpg")

    t = sub.add_parser("train", parents=[common], help="train DDPG and save the policy")
    t.add_argument("--checkpoint", type=Path, help="policy file (default OUT/policy_ddpg.json)")

    m = sub.add_parser("validate-mc", parents=[common], help="check analytic values by Monte Carlo")
    m.add_argument("--samples", type=int)

    sub.add_parser("show-config", parents=[common], help="print the merged configuration")
    return p


def _load(args) -> RunConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    return load_run_config(data, seed=args.seed, output_dir=args.out)


def _dump(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load(args)
        if args.command == "show-config":
            _dump(cfg.to_dict())
        elif args.command == "eval":
            _dump(cmd_eval(cfg, args.speed, args.rri))
        elif args.command == "sweep":
            rows = cmd_sweep(cfg, args.vary, args.fixed, args.values, args.step)
            path = write_csv(Path(cfg.output_dir) / f"sweep_{args.vary}.csv", SWEEP_COLUMNS, rows)
            print(path)
        elif args.command in ("optimize", "train"):
            method = "ddpg" if args.command == "train" else args.method
            if method == "llm" and not args.mock:
                log.info("using endpoint %s", cfg.llm.base_url)
            summary = cmd_optimize(cfg, method, mock=args.mock, checkpoint=args.checkpoint)
            _dump(summary)
            if summary["status"] == "endpoint_error":
                return EXIT_ENDPOINT
        elif args.command == "validate-mc":
            report = cmd_validate_mc(cfg, args.samples)
            _write_json(Path(cfg.output_dir) / "validate_mc.json", report)
            _dump(report)
            if not all(r["passed"] for r in report):
                return EXIT_MC_GATE
    except FeasibilityError as exc:
        bound = f" [{exc.bound}]" if exc.bound else ""
        print(f"error: infeasible decision{bound}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpsAoiError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
