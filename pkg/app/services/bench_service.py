"""
Optimization-chain benchmark: each row stacks one runtime optimization on the previous one
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..models.configs import ChainConfig, PipelineConfig, SceneConfig
from ..models.planning import ChainReport, ChainRow
from ..models.scene import Clip, Scene
from ..models.trajectory import Trajectory
from .denoiser_service import DenoiserModel, build_prompt
from .planner_service import plan, run_clip
from .reward_service import RewardScorer, reward_scorer
from .runtime_service import DecodeSession, RuntimeOptions
from .scene_service import generate_clip

logger = logging.getLogger(__name__)

ROW_OPTIONS: Dict[str, RuntimeOptions] = {
    "baseline": RuntimeOptions(merged_infer=False, prefix_cache=False, fused_commit=False),
    "merged": RuntimeOptions(merged_infer=True, prefix_cache=False, fused_commit=False),
    "prefix_cache": RuntimeOptions(merged_infer=True, prefix_cache=True, fused_commit=False),
    "action_expert": RuntimeOptions(merged_infer=True, prefix_cache=True, fused_commit=False),
    "fused": RuntimeOptions(merged_infer=True, prefix_cache=True, fused_commit=True),
    "asd": RuntimeOptions(merged_infer=True, prefix_cache=True, fused_commit=True),
}

Timing = Tuple[float, float]


def _plan_scenes(
    scenes: Sequence[Scene], model: DenoiserModel, cfg: PipelineConfig, options: RuntimeOptions, scorer: RewardScorer
) -> Tuple[Timing, float]:
    """Mean per-scene (prefill_ms, decode_ms) and mean aggregate reward of one pass"""
    prefill, decode, rewards = [], [], []
    for scene in scenes:
        session = DecodeSession(model, build_prompt(scene, model.dtype), options)
        result = plan(session, model, cfg)
        traj = Trajectory(waypoints=result.selected_candidate.post_edit, timestep=scene.expert.timestep)
        rewards.append(scorer.score(traj, scene).aggregate)
        prefill.append(session.prefill_seconds)
        decode.append(session.decode_seconds)
    return (1e3 * float(np.mean(prefill)), 1e3 * float(np.mean(decode))), float(np.mean(rewards))


def _run_clips(
    clips: Sequence[Clip],
    model: DenoiserModel,
    cfg: PipelineConfig,
    options: RuntimeOptions,
    scorer: RewardScorer,
    mode: str,
) -> Tuple[Timing, float, List[Timing], List[Timing]]:
    """Clip pass: mean per-frame timing, mean reward, and the raw timings split into full and lite frames"""
    prefill, decode, rewards, full, lite = [], [], [], [], []
    for clip in clips:
        run = run_clip(clip, model, cfg, mode=mode, options=options, scorer=scorer)
        prefill.extend(run.prefill_seconds)
        decode.extend(run.decode_seconds)
        rewards.extend(r.aggregate for r in run.rewards)
        for f, (p, d) in enumerate(zip(run.prefill_seconds, run.decode_seconds)):
            (lite if f in run.lite_frames else full).append((1e3 * p, 1e3 * d))
    return (1e3 * float(np.mean(prefill)), 1e3 * float(np.mean(decode))), float(np.mean(rewards)), full, lite


def _summarize(name: str, timings: List[Timing], reward: float, reference: float, gate: float) -> ChainRow:
    pre = np.array([t[0] for t in timings])
    dec = np.array([t[1] for t in timings])
    delta = reward - reference
    return ChainRow(
        name=name,
        prefill_ms_mean=float(pre.mean()),
        prefill_ms_p50=float(np.percentile(pre, 50)),
        prefill_ms_p90=float(np.percentile(pre, 90)),
        decode_ms_mean=float(dec.mean()),
        decode_ms_p50=float(np.percentile(dec, 50)),
        decode_ms_p90=float(np.percentile(dec, 90)),
        reward_mean=reward,
        reward_delta=delta,
        within_gate=abs(delta) <= gate,
    )


def bench_chain(
    scenes: Sequence[Scene],
    model: DenoiserModel,
    chain: Optional[ChainConfig] = None,
    pipeline: Optional[PipelineConfig] = None,
    scene_cfg: Optional[SceneConfig] = None,
    full_width_model: Optional[DenoiserModel] = None,
    clip_seeds: Sequence[int] = (0,),
    scorer: Optional[RewardScorer] = None,
) -> ChainReport:
    """
    Measure the configured chain rows.

    Rows before ``action_expert`` run on ``full_width_model`` when one is given,
    rows from it on use ``model``. Scene rows report their reward delta against
    the baseline row; the ``asd`` row reports alternating full/lite clips
    against full-step-every-frame on the same clips.

    Args:
        scenes: Scenes planned once per measured iteration
        model: Narrow action-expert model (the deployed configuration)
        chain: Rows, warmup/iteration counts and the quality gate
        pipeline: Planner settings shared by every row
        scene_cfg: Scene settings for the ASD clips
        full_width_model: Optional full-width checkpoint for the rows before ``action_expert``
        clip_seeds: Seeds of the ASD clips
        scorer: Reward scorer

    Returns:
        ChainReport with one row per configured row name plus raw per-iteration timings
    """
    chain = chain or ChainConfig()
    pipeline = (pipeline or PipelineConfig()).model_copy(update={"mode": "standard"})
    scorer = scorer or reward_scorer
    if full_width_model is None and "action_expert" in chain.rows:
        logger.info("no full-width checkpoint given; action_expert row repeats the prefix_cache configuration")

    report = ChainReport(rows=[], quality_gate=chain.quality_gate)
    baseline_reward: Optional[float] = None
    for name in chain.rows:
        options = ROW_OPTIONS[name]
        before_expert = chain_index(name) < chain_index("action_expert")
        row_model = full_width_model if (before_expert and full_width_model is not None) else model
        if name == "asd":
            report.rows.append(_bench_asd(row_model, chain, pipeline, scene_cfg, clip_seeds, scorer, report))
            continue
        timings: List[Timing] = []
        reward = 0.0
        for i in range(chain.warmup + chain.iters):
            timing, reward_i = _plan_scenes(scenes, row_model, pipeline, options, scorer)
            if i >= chain.warmup:
                timings.append(timing)
                reward = reward_i
        if baseline_reward is None:
            baseline_reward = reward
        report.timings[name] = timings
        row = _summarize(name, timings, reward, baseline_reward, chain.quality_gate)
        logger.info(
            f"bench {name}: prefill {row.prefill_ms_mean:.2f} ms, decode {row.decode_ms_mean:.2f} ms, "
            f"reward {row.reward_mean:.2f} ({row.reward_delta:+.2f})"
        )
        report.rows.append(row)
    return report


def chain_index(name: str) -> int:
    return list(ROW_OPTIONS).index(name)


def _bench_asd(
    model: DenoiserModel,
    chain: ChainConfig,
    pipeline: PipelineConfig,
    scene_cfg: Optional[SceneConfig],
    clip_seeds: Sequence[int],
    scorer: RewardScorer,
    report: ChainReport,
) -> ChainRow:
    options = ROW_OPTIONS["asd"]
    clips = [generate_clip(s, scene_cfg, n_frames=chain.clip_frames, vocab=model.vocab) for s in clip_seeds]
    _, full_reward, _, _ = _run_clips(clips, model, pipeline, options, scorer, "full")
    timings: List[Timing] = []
    reward = full_reward
    full_frames: List[Timing] = []
    lite_frames: List[Timing] = []
    for i in range(chain.warmup + chain.iters):
        timing, reward_i, full, lite = _run_clips(clips, model, pipeline, options, scorer, "alternating")
        if i >= chain.warmup:
            timings.append(timing)
            reward = reward_i
            full_frames.extend(full)
            lite_frames.extend(lite)
    report.timings["asd"] = timings
    report.timings["asd_full_frames"] = full_frames
    report.timings["asd_lite_frames"] = lite_frames
    row = _summarize("asd", timings, reward, full_reward, chain.quality_gate)
    logger.info(f"bench asd: reward {row.reward_mean:.2f} vs full-step {full_reward:.2f}")
    return row
