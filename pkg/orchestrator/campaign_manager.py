"""
Campaign Manager — Monte Carlo campaigns of paired Fisher / straight episodes.

Every run index gets one episode seed shared by all policy arms, so the
arms see the same initial state and the same truth noise. Episodes run in
parallel with joblib; results come back as envelopes
({"success": True, ...} / {"success": False, "error": ...}) and are
assembled into an RmseReport in submission order.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from numpy.typing import NDArray

from navigation.errors import CampaignFailure, ConfigError
from navigation.ocp import OcpConfig
from orchestrator.config import RunConfig, Scenario, build_ocp, build_scenario, parse_config, run_seed
from orchestrator.graph_orchestrator import EpisodeLog, fisher_feedback_episode, straight_baseline_episode

logger = logging.getLogger(__name__)

ARMS = ("fisher", "straight")
EXCLUSION_LIMIT = 0.05
MANIFEST_KIND = "montecarlo_manifest"


# ────────────────────────────────────────────────────────────
# Episode task (runs inside a worker, returns an envelope)
# ────────────────────────────────────────────────────────────


def _run_episode(cfg: OcpConfig, scenario: Scenario, arm: str, run: int, seed: int) -> Dict[str, Any]:
    """Run one episode of one arm and wrap the outcome in a result envelope."""
    runner = fisher_feedback_episode if arm == "fisher" else straight_baseline_episode
    try:
        log = runner(cfg, scenario, seed)
        log.solves = []
        return {"success": True, "arm": arm, "run": run, "seed": seed, "log": log}
    except Exception as e:
        return {"success": False, "arm": arm, "run": run, "seed": seed, "error": str(e)}


# ────────────────────────────────────────────────────────────
# RMSE report
# ────────────────────────────────────────────────────────────


@dataclass
class RmseReport:
    """Per-step, per-coordinate RMSE of the estimate over the included runs of each arm."""

    steps: NDArray
    rmse: Dict[str, NDArray]            # arm -> (T + 1, 6)
    runs: int
    fingerprint: str = ""

    def horizontal(self, arm: str) -> NDArray:
        """Joint x1/x2 RMSE per step."""
        return np.hypot(self.rmse[arm][:, 0], self.rmse[arm][:, 1])

    def final_half_mean(self, arm: str) -> float:
        """Mean horizontal RMSE over steps T/2 + 1 .. T."""
        horizon = int(self.steps[-1])
        mask = self.steps > horizon // 2
        return float(np.mean(self.horizontal(arm)[mask]))

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, Any] = {"k": self.steps}
        for arm in ARMS:
            if arm in self.rmse:
                columns[f"rmse_x1_{arm}"] = self.rmse[arm][:, 0]
                columns[f"rmse_x2_{arm}"] = self.rmse[arm][:, 1]
        return pd.DataFrame(columns)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        logger.info("Wrote RMSE report to %s", path)
        return path


def rmse_from_logs(logs: Mapping[str, Sequence[EpisodeLog]], fingerprint: str = "") -> RmseReport:
    """
    RMSE_k = sqrt(mean over runs of (estimate_k - truth_k)^2), per arm and coordinate.

    A pure function of the logs, so persisted CSV logs reproduce it exactly.
    """
    rmse: Dict[str, NDArray] = {}
    steps: Optional[NDArray] = None
    runs = 0
    for arm, arm_logs in logs.items():
        if not arm_logs:
            raise ValueError(f"no episode logs for arm '{arm}'")
        errors = np.stack([log.estimates() - log.truth() for log in arm_logs])
        rmse[arm] = np.sqrt(np.mean(errors ** 2, axis=0))
        steps = arm_logs[0].steps
        runs = len(arm_logs)
    return RmseReport(steps=np.asarray(steps), rmse=rmse, runs=runs, fingerprint=fingerprint)


def config_fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode("utf-8")).hexdigest()[:16]


# ────────────────────────────────────────────────────────────
# Campaign
# ────────────────────────────────────────────────────────────


@dataclass
class CampaignResult:
    report: RmseReport
    logs: Dict[str, List[EpisodeLog]]
    seeds: List[int]
    excluded: List[Dict[str, Any]] = field(default_factory=list)
    summary: Dict[str, float] = field(default_factory=dict)


def paired_summary(report: RmseReport, logs: Mapping[str, Sequence[EpisodeLog]]) -> Dict[str, float]:
    """Final-half horizontal RMSE per arm and the share of runs where Fisher ends with more information."""
    summary = {f"final_half_rmse_{arm}": report.final_half_mean(arm) for arm in report.rmse}
    if "fisher" in logs and "straight" in logs:
        pairs = list(zip(logs["fisher"], logs["straight"]))
        wins = sum(f.trace_J()[-1] > s.trace_J()[-1] for f, s in pairs)
        summary["fisher_trJ_win_rate"] = wins / len(pairs) if pairs else float("nan")
    return summary


def monte_carlo(
    cfg: RunConfig,
    runs: Optional[int] = None,
    arms: Sequence[str] = ARMS,
    jobs: int = 1,
    base_dir: Optional[Path] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> CampaignResult:
    """
    Run M paired episodes per arm and reduce them to an RmseReport.

    Runs whose episode failed or hit weight degeneracy in any arm are
    excluded pairwise.

    Raises:
        CampaignFailure: more than 5% of the runs were excluded.
    """
    runs = cfg.runs if runs is None else runs
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ValueError(f"unknown arms {sorted(unknown)}")

    scenario = build_scenario(cfg, base_dir)
    ocp = build_ocp(cfg)
    seeds = [run_seed(cfg.seed, i) for i in range(runs)]

    logger.info("Campaign: %d runs x %d arms, N=%d, jobs=%d", runs, len(arms), cfg.n_particles, jobs)
    envelopes = Parallel(n_jobs=jobs, backend="loky")(
        delayed(_run_episode)(ocp, scenario, arm, i, seed)
        for i, seed in enumerate(seeds)
        for arm in arms
    )

    by_run: Dict[int, Dict[str, Dict[str, Any]]] = {}
    for envelope in envelopes:
        by_run.setdefault(envelope["run"], {})[envelope["arm"]] = envelope

    logs: Dict[str, List[EpisodeLog]] = {arm: [] for arm in arms}
    excluded: List[Dict[str, Any]] = []
    for i in range(runs):
        reasons = []
        for arm in arms:
            envelope = by_run[i][arm]
            if not envelope["success"]:
                reasons.append(f"{arm}: {envelope['error']}")
            elif envelope["log"].degenerate:
                reasons.append(f"{arm}: weight degeneracy at steps {envelope['log'].degenerate_steps}")
        if reasons:
            logger.warning("Excluding run %d (seed %d): %s", i, seeds[i], "; ".join(reasons))
            excluded.append({"run": i, "seed": seeds[i], "reasons": reasons})
            continue
        for arm in arms:
            logs[arm].append(by_run[i][arm]["log"])

    if len(excluded) > EXCLUSION_LIMIT * runs:
        raise CampaignFailure(f"{len(excluded)} of {runs} runs excluded (limit {EXCLUSION_LIMIT:.0%})")

    report = rmse_from_logs(logs, fingerprint=config_fingerprint(cfg))
    result = CampaignResult(report=report, logs=logs, seeds=seeds, excluded=excluded)
    result.summary = paired_summary(report, logs)
    logger.info("Campaign summary: %s", result.summary)

    if output_dir is not None:
        write_campaign(result, cfg, arms, output_dir)
    return result


# ────────────────────────────────────────────────────────────
# Persistence and manifest replay
# ────────────────────────────────────────────────────────────


def write_campaign(result: CampaignResult, cfg: RunConfig, arms: Sequence[str], output_dir: Union[str, Path]) -> Path:
    """Write rmse.csv, manifest.json and one CSV per included episode."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.report.write_csv(out / "rmse.csv")
    for arm, arm_logs in result.logs.items():
        for log in arm_logs:
            log.write_csv(out / "episodes" / f"{arm}_seed{log.seed}.csv")

    manifest = {
        "kind": MANIFEST_KIND,
        "fingerprint": result.report.fingerprint,
        "runs": len(result.seeds),
        "arms": list(arms),
        "master_seed": cfg.seed,
        "seeds": result.seeds,
        "excluded": result.excluded,
        "summary": result.summary,
        "config": json.loads(cfg.to_json()),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    logger.info("Wrote campaign manifest to %s", path)
    return path


def load_campaign_input(path: Union[str, Path]) -> Tuple[RunConfig, Optional[int], Sequence[str]]:
    """
    Read either a RunConfig or a campaign manifest.

    Returns:
        (config, runs or None, arms). For a manifest, runs and arms are those recorded.

    Raises:
        ConfigError: unreadable file, invalid config, or seeds that do not match the master seed.
    """
    path = Path(path)
    try:
        text = path.read_text()
        data = json.loads(text)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e

    if not (isinstance(data, dict) and data.get("kind") == MANIFEST_KIND):
        return parse_config(text, source=str(path)), None, ARMS

    cfg = parse_config(json.dumps(data.get("config", {})), source=f"{path}:config")
    runs = int(data["runs"])
    expected = [run_seed(cfg.seed, i) for i in range(runs)]
    if data.get("seeds") != expected:
        raise ConfigError(f"{path}: recorded seeds do not derive from master seed {cfg.seed}")
    logger.info("Replaying manifest %s (%d runs)", path, runs)
    return cfg, runs, tuple(data.get("arms", ARMS))
