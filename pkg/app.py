"""
Fisher Feedback Navigation — Command Line Entry Point

Binds configuration files to single episodes, Monte Carlo campaigns,
validation suites and terrain exports.

    python app.py simulate configs/default.json --seed 7 --arm fisher
    python app.py montecarlo configs/default.json --runs 50 --jobs 8
    python app.py validate --suite all
    python app.py terrain --export configs/default.json --bounds -500 2500 -1000 1500 --resolution 25 --out terrain.csv

Exit codes: 0 success, 1 validation failure, 2 configuration error,
3 numerical failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from navigation.errors import ConfigError, GridParseError, NavigationError, TooSmallLattice
from navigation.ocp import write_diagnostics
from navigation.particle_filter import write_snapshots
from navigation.terrain import export_grid
from orchestrator.campaign_manager import load_campaign_input, monte_carlo
from orchestrator.config import build_ocp, build_scenario, load_config
from orchestrator.graph_orchestrator import fisher_feedback_episode, straight_baseline_episode
from orchestrator.validation import SUITES, run_suite

logger = logging.getLogger("dualnav")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _banner(*lines: str):
    print(f"\n{'='*60}")
    for line in lines:
        print(f"  {line}")
    print(f"{'='*60}\n")


def _scenario(cfg, config_path: Path):
    try:
        return build_scenario(cfg, base_dir=config_path.parent)
    except (GridParseError, TooSmallLattice) as e:
        raise ConfigError(f"terrain grid: {e}") from e


# ────────────────────────────────────────────────────────────
# Commands
# ────────────────────────────────────────────────────────────


def cmd_simulate(args) -> int:
    """Run one episode and write its log (plus optional particle and solver dumps)."""
    config_path = Path(args.config)
    cfg = load_config(config_path)
    scenario = _scenario(cfg, config_path)
    ocp = build_ocp(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out or cfg.output_dir)

    _banner("Fisher Feedback Navigation — simulate", f"Arm: {args.arm}  Seed: {seed}", f"Output: {out}")
    runner = fisher_feedback_episode if args.arm == "fisher" else straight_baseline_episode
    log = runner(ocp, scenario, seed, dump_particles=args.dump_particles)

    stem = f"episode_{args.arm}_seed{seed}"
    log.write_csv(out / f"{stem}.csv")
    if args.dump_particles:
        write_snapshots(log.snapshots, out / f"{stem}_particles.csv")
    if args.diagnostics:
        write_diagnostics(log.solves, out / f"{stem}_solver.csv")

    print(f"Final distance to target: {log.final_distance:.3f} m")
    if log.degenerate:
        print(f"Weight degeneracy fallback at steps {log.degenerate_steps}")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    """Run a paired campaign from a config or replay one from its manifest."""
    source = Path(args.config)
    cfg, recorded_runs, arms = load_campaign_input(source)
    runs = args.runs if args.runs is not None else (recorded_runs or cfg.runs)
    out = Path(args.out or cfg.output_dir)

    _banner("Fisher Feedback Navigation — montecarlo", f"Runs: {runs}  Jobs: {args.jobs}", f"Output: {out}")
    try:
        result = monte_carlo(cfg, runs=runs, arms=arms, jobs=args.jobs, base_dir=source.parent, output_dir=out)
    except (GridParseError, TooSmallLattice) as e:
        raise ConfigError(f"terrain grid: {e}") from e

    for key, value in result.summary.items():
        print(f"{key}: {value:.6g}")
    if result.excluded:
        print(f"Excluded runs: {[item['run'] for item in result.excluded]}")
    return EXIT_OK


def cmd_validate(args) -> int:
    """Run validation suites; exit 1 when any check fails."""
    cfg = load_config(args.config) if args.config else None
    _banner("Fisher Feedback Navigation — validate", f"Suite: {args.suite}")
    report = run_suite(args.suite, cfg)
    for line in report.lines():
        print(line)
    print(f"\n{sum(c.passed for c in report.checks)}/{len(report.checks)} checks passed")
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_terrain(args) -> int:
    """Export the terrain of a config as a grid CSV."""
    config_path = Path(args.export)
    cfg = load_config(config_path)
    scenario = _scenario(cfg, config_path)
    try:
        path = export_grid(scenario.terrain, tuple(args.bounds), args.resolution, args.out)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    except OSError as e:
        raise ConfigError(f"cannot write {args.out}: {e}") from e
    print(f"Terrain grid written to {path}")
    return EXIT_OK


# ────────────────────────────────────────────────────────────
# Parser
# ────────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualnav",
        description="Fisher feedback control for terrain-aided navigation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one closed-loop episode")
    p.add_argument("config", help="RunConfig JSON file")
    p.add_argument("--seed", type=_non_negative_int, default=None, help="episode seed (default: config seed)")
    p.add_argument("--arm", choices=("fisher", "straight"), default="fisher")
    p.add_argument("--dump-particles", action="store_true", help="write the posterior particles of every step")
    p.add_argument("--diagnostics", action="store_true", help="write per-iteration solver diagnostics")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("montecarlo", help="run a paired Monte Carlo campaign")
    p.add_argument("config", help="RunConfig JSON file or campaign manifest")
    p.add_argument("--runs", type=_positive_int, default=None, help="number of paired runs M")
    p.add_argument("--jobs", type=int, default=1, help="parallel episodes")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("validate", help="run oracle validation suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--config", default=None, help="RunConfig JSON file (default: built-in defaults)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("terrain", help="export a terrain map as a grid CSV")
    p.add_argument("--export", required=True, metavar="CONFIG", help="RunConfig JSON file")
    p.add_argument("--bounds", type=float, nargs=4, required=True, metavar=("X1_MIN", "X1_MAX", "X2_MIN", "X2_MAX"))
    p.add_argument("--resolution", type=float, required=True, help="node spacing in meters")
    p.add_argument("--out", required=True, help="grid CSV path")
    p.set_defaults(func=cmd_terrain)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("DUALNAV_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except NavigationError as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL


# ────────────────────────────────────────────────────────────
# Run
# ────────────────────────────────────────────────────────────

if __name__ == "__main__":
    sys.exit(main())
