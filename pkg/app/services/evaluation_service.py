"""
Evaluation: single and best-of-N rewards, AutoEdit ablation, parameter sweeps and plot series
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..errors import ConfigurationError, ParseError
from ..models.configs import PipelineConfig
from ..models.planning import EvalSummary, SceneReport, SweepRow
from ..models.scene import Scene
from .denoiser_service import DenoiserModel
from .planner_service import plan
from .reward_service import RewardScorer, mean_breakdown, reward_scorer
from .runtime_service import RuntimeOptions
from .storage_service import StorageService, storage_service

logger = logging.getLogger(__name__)

SWEEPABLE = ("draft_steps", "edit_steps", "n_goals", "nms_radius", "commit_fraction")
# goal-side sweeps only move the oracle; single mode always takes the top goal
ORACLE_SWEEPS = ("n_goals", "nms_radius")
SERIES_KINDS = ("sweep", "chain", "rl_log", "sft_log", "eval")


def evaluate_scene(
    scene: Scene,
    model: DenoiserModel,
    cfg: PipelineConfig,
    best_of_draws: Optional[int] = None,
    options: Optional[RuntimeOptions] = None,
    scorer: Optional[RewardScorer] = None,
) -> SceneReport:
    """
    Score the single (highest-confidence goal) plan and, when ``best_of_draws``
    is set, the oracle best over n_goals x best_of_draws candidates
    """
    scorer = scorer or reward_scorer
    model.eval()
    single_cfg = cfg.model_copy(update={"mode": "standard"})
    single = plan(scene, model, single_cfg, options, scorer=scorer)
    chosen = single.selected_candidate
    report = SceneReport(
        seed=scene.seed,
        mode="single",
        goals=single.goals,
        candidates=single.candidates,
        selected=single.selected,
        single=chosen.reward,
        single_pre_edit=chosen.pre_edit_reward,
    )
    if best_of_draws:
        bon_cfg = cfg.model_copy(update={"mode": "best_of_n", "draws_per_goal": best_of_draws})
        generator = torch.Generator().manual_seed(scene.seed)
        bon = plan(scene, model, bon_cfg, options, generator, scorer)
        best = bon.selected_candidate.reward
        oracle = best if best.aggregate >= chosen.reward.aggregate else chosen.reward
        report = report.model_copy(
            update={"mode": "best_of_n", "goals": bon.goals, "candidates": bon.candidates, "selected": bon.selected, "oracle": oracle}
        )
    return report


def evaluate_corpus(
    scenes: Sequence[Scene],
    model: DenoiserModel,
    cfg: PipelineConfig,
    best_of_draws: Optional[int] = None,
    options: Optional[RuntimeOptions] = None,
    scorer: Optional[RewardScorer] = None,
) -> Tuple[List[SceneReport], EvalSummary]:
    if not scenes:
        raise ConfigurationError("evaluation needs at least one scene")
    reports = [evaluate_scene(s, model, cfg, best_of_draws, options, scorer) for s in scenes]
    summary = EvalSummary(
        n_scenes=len(reports),
        single=mean_breakdown([r.single for r in reports]),
        single_pre_edit=mean_breakdown([r.single_pre_edit for r in reports]),
        oracle=mean_breakdown([r.oracle for r in reports]) if best_of_draws else None,
    )
    logger.info(
        f"eval on {len(reports)} scene(s): single={summary.single.aggregate:.2f} "
        f"pre-edit={summary.single_pre_edit.aggregate:.2f} "
        + (f"oracle={summary.oracle.aggregate:.2f}" if summary.oracle else "")
    )
    return reports, summary


def sweep(
    scenes: Sequence[Scene],
    model: DenoiserModel,
    cfg: PipelineConfig,
    param: str,
    values: Sequence[float],
    best_of_draws: int = 1,
    scorer: Optional[RewardScorer] = None,
) -> List[SweepRow]:
    """
    Evaluate the corpus once per value of one pipeline parameter

    Step sweeps report single-plan rewards; goal-count and NMS sweeps report
    the oracle over the proposed goals.
    """
    if param not in SWEEPABLE:
        raise ConfigurationError(f"cannot sweep {param!r}; choose one of {', '.join(SWEEPABLE)}")
    rows = []
    for value in values:
        swept = PipelineConfig(**{**cfg.model_dump(), param: value})
        oracle = param in ORACLE_SWEEPS
        _, summary = evaluate_corpus(scenes, model, swept, best_of_draws if oracle else None, scorer=scorer)
        headline = summary.oracle if oracle else summary.single
        rows.append(
            SweepRow(
                param=param,
                value=float(value),
                reward_mean=headline.aggregate,
                reward_pre_edit_mean=summary.single_pre_edit.aggregate,
                dac_mean=headline.dac,
                n_scenes=summary.n_scenes,
            )
        )
        logger.info(f"sweep {param}={value}: reward {headline.aggregate:.2f}")
    return rows


def build_series(header: Dict, records: List[Dict], source: str = "") -> Dict[str, List[Dict]]:
    """Plot-ready series from one report file, keyed by series name"""
    kind = header["kind"]
    if kind == "sweep":
        series: Dict[str, List[Dict]] = {}
        for r in records:
            series.setdefault(f"reward_vs_{r['param']}", []).append(
                {"x": r["value"], "reward": r["reward_mean"], "reward_pre_edit": r["reward_pre_edit_mean"], "dac": r["dac_mean"]}
            )
        return series
    if kind == "chain":
        return {
            "chain_latency": [
                {"row": r["name"], "prefill_ms": r["prefill_ms_mean"], "decode_ms": r["decode_ms_mean"], "reward_delta": r["reward_delta"]}
                for r in records
            ]
        }
    if kind == "rl_log":
        return {
            "autoedit_gain": [
                {"epoch": r["epoch"], "pre_edit": r["reward_pre_edit"], "post_edit": r["reward_post_edit"],
                 "gap": r["reward_post_edit"] - r["reward_pre_edit"]}
                for r in records
            ]
        }
    if kind == "sft_log":
        return {"sft_loss": [{k: r[k] for k in ("step", "total", "dlm", "sap", "field", "goal")} for r in records]}
    if kind == "eval":
        return {
            "scene_rewards": [
                {"seed": r["seed"], "single": r["single"]["aggregate"], "pre_edit": r["single_pre_edit"]["aggregate"],
                 "oracle": r["oracle"]["aggregate"] if r.get("oracle") else None}
                for r in records
            ]
        }
    logger.warning(f"{source}: no plot series for report kind {kind!r}")
    return {}


def plot_data(
    report_paths: Sequence[Union[str, Path]],
    out_dir: Union[str, Path],
    storage: Optional[StorageService] = None,
) -> Dict[str, Path]:
    """
    Turn report files into one series file per figure plus a manifest

    Raises:
        ParseError: a report is malformed (carries the line number)
    """
    storage = storage or storage_service
    out_dir = Path(out_dir)
    merged: Dict[str, List[Dict]] = {}
    hashes = set()
    for path in report_paths:
        header, records = storage.read_records(path)
        hashes.add(header.get("run_config_hash"))
        if header["kind"] not in SERIES_KINDS:
            logger.warning(f"{path}: no plot series for report kind {header['kind']!r}")
            continue
        for i, record in enumerate(records):
            try:
                series = build_series(header, [record], str(path))
            except (KeyError, TypeError) as e:
                # header is line 1
                raise ParseError(f"{Path(path).name}: report record missing field {e}", i + 2) from e
            for name, rows in series.items():
                merged.setdefault(name, []).extend(rows)
    run_hash = hashes.pop() if len(hashes) == 1 else None
    written = {}
    for name, rows in sorted(merged.items()):
        written[name] = storage.write_records(out_dir / f"{name}.jsonl", storage.header("series", run_hash, series=name), rows)
    manifest = [{"series": name, "path": str(p), "rows": len(merged[name])} for name, p in written.items()]
    storage.write_records(out_dir / "manifest.jsonl", storage.header("manifest", run_hash), manifest)
    return written


def mean_reward(reports: Sequence[SceneReport]) -> float:
    return float(np.mean([r.single.aggregate for r in reports]))
