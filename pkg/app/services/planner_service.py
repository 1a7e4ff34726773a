"""
Decision, draft and reflect: goal proposal, masked drafting and token-to-token editing
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..errors import ContractError, FullStepFallback
from ..models.configs import PipelineConfig
from ..models.planning import Candidate, GoalProposal, PlanResult, RewardBreakdown
from ..models.scene import Clip, EgoMotion, Scene
from ..models.trajectory import ACTION_LEN, GOAL_POSITIONS, K_WAYPOINTS, TokenSequence, Trajectory, Vocabulary
from ..utils.geometry import to_frame
from .codec_service import detokenize_array, masked_block, point_of, tokenize_array, tokenize_point
from .denoiser_service import DenoiserModel, build_prompt, joint_goal_logits
from .reward_service import RewardScorer, reward_scorer
from .runtime_service import DecodeSession, RuntimeOptions, goal_position_mask, propose_tokens

logger = logging.getLogger(__name__)

N_EDITABLE = ACTION_LEN - len(GOAL_POSITIONS)


@dataclass
class Transition:
    """One token-state change of a rollout"""
    phase: Literal["draft", "edit"]
    before: torch.Tensor  # (B, L)
    after: torch.Tensor  # (B, L)
    token_log_probs: torch.Tensor  # (B, L) policy log-prob of each position's proposal

    @property
    def changed(self) -> torch.Tensor:
        return self.before != self.after


@dataclass
class DecodeTrace:
    tokens: torch.Tensor  # (B, L) final state
    transitions: List[Transition] = field(default_factory=list)

    def states(self) -> List[torch.Tensor]:
        if not self.transitions:
            return [self.tokens]
        return [self.transitions[0].before] + [t.after for t in self.transitions]


def nms_select(positions: np.ndarray, order: Sequence[int], radius: float, limit: int) -> List[int]:
    """Greedy suppression in ``order``: keep a candidate unless a kept one lies closer than ``radius``"""
    kept: List[int] = []
    for i in order:
        if all(np.hypot(*(positions[i] - positions[j])) >= radius for j in kept):
            kept.append(int(i))
            if len(kept) == limit:
                break
    return kept


def propose_goals(
    session: DecodeSession,
    cfg: PipelineConfig,
    generator: Optional[torch.Generator] = None,
    n_goals: Optional[int] = None,
) -> List[GoalProposal]:
    """
    Top-k endpoint cells from the goal posterior, NMS-filtered by BEV distance

    Args:
        session: Decode session of the current scene
        cfg: Pipeline configuration (top_k, nms_radius, n_goals)
        generator: When given, the visiting order of the top-k cells is sampled
        n_goals: Overrides cfg.n_goals

    Returns:
        At most n_goals proposals, sorted by probability (ties: lower token pair first)
    """
    vocab = session.model.vocab
    goal = session.goal_factors if session.goal_factors is not None else session.prepare()
    joint = joint_goal_logits(goal.to(torch.float64), vocab)
    probs = torch.softmax(joint.reshape(-1), dim=0).numpy()
    limit = n_goals or cfg.n_goals

    # flat index = x_bin * bins_y + y_bin, so ascending index is ascending token pair
    top = np.argsort(-probs, kind="stable")[: cfg.top_k]
    top = top[probs[top] > 0]
    x_bins, y_bins = np.divmod(top, vocab.bins_y)
    positions = np.column_stack([vocab.x_centers()[x_bins], vocab.y_centers()[y_bins]])

    if generator is not None or cfg.sample_goals:
        weights = torch.as_tensor(probs[top], dtype=torch.float64)
        order = torch.multinomial(weights, len(top), replacement=False, generator=generator).tolist()
    else:
        order = list(range(len(top)))
    kept = nms_select(positions, order, cfg.nms_radius, limit)
    kept.sort(key=lambda i: (-probs[top[i]], top[i]))
    if len(kept) < limit:
        logger.debug(f"only {len(kept)} of {limit} goal(s) survived suppression")
    return [
        GoalProposal(
            x_token=int(x_bins[i]) + vocab.x_offset,
            y_token=int(y_bins[i]) + vocab.y_offset,
            probability=float(probs[top[i]]),
            position=(float(positions[i, 0]), float(positions[i, 1])),
        )
        for i in kept
    ]


def draft_schedule(masked: int, rounds: int) -> List[int]:
    """Tokens committed per round: ceil(remaining / rounds_left)"""
    rounds = max(1, min(rounds, masked)) if masked else 0
    counts = []
    remaining = masked
    for r in range(rounds):
        n = math.ceil(remaining / (rounds - r))
        counts.append(n)
        remaining -= n
    return counts


def _draft_rounds(
    session: DecodeSession,
    x: torch.Tensor,
    rounds: int,
    temperature: float,
    generator: Optional[torch.Generator],
    trace: DecodeTrace,
) -> torch.Tensor:
    masked = int((x[0] == session.mask_id).sum())
    if bool(((x == session.mask_id).sum(dim=1) != masked).any()):
        raise ContractError("drafting rows must share one mask count")
    for n in draft_schedule(masked, rounds):
        logits = session.logits(x)
        result = session.commit(logits, x, n, "draft", temperature, generator)
        trace.transitions.append(Transition("draft", x, result.tokens, result.token_log_probs))
        x = result.tokens
    return x


def draft_trajectory(
    session: DecodeSession,
    goals: Union[GoalProposal, Sequence[GoalProposal]],
    cfg: PipelineConfig,
    generator: Optional[torch.Generator] = None,
    temperature: Optional[float] = None,
    draws: int = 1,
) -> DecodeTrace:
    """
    Fill the 14 non-goal positions in ``cfg.draft_steps`` parallel rounds

    Rows are ordered goal-major: row g * draws + d is draw d of goal g.
    """
    if isinstance(goals, GoalProposal):
        goals = [goals]
    vocab = session.model.vocab
    rows = [masked_block(vocab, g.tokens) for g in goals for _ in range(draws)]
    x = torch.from_numpy(np.stack(rows))
    trace = DecodeTrace(tokens=x)
    x = _draft_rounds(session, x, cfg.draft_steps, temperature or cfg.temperature, generator, trace)
    trace.tokens = x
    return trace


class CommitPolicy:
    """Commit the floor(fraction * 14) least confident non-goal positions that would change"""

    def __init__(self, fraction: float = 0.25):
        if not 0 < fraction <= 1:
            raise ContractError(f"commit fraction must lie in (0, 1], got {fraction}")
        self.fraction = fraction

    @property
    def count(self) -> int:
        return int(math.floor(self.fraction * N_EDITABLE))


class FixedCommit:
    """Explicit commit mask; goal positions are never written"""

    def __init__(self, mask: Union[Sequence[bool], torch.Tensor]):
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.shape[-1] != ACTION_LEN:
            raise ContractError(f"commit mask must have length {ACTION_LEN}")
        self.mask = mask & ~goal_position_mask(ACTION_LEN)


def autoedit_round(
    session: DecodeSession,
    x: torch.Tensor,
    policy: Union[CommitPolicy, FixedCommit, None] = None,
    temperature: float = 1.0,
    generator: Optional[torch.Generator] = None,
    trace: Optional[DecodeTrace] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One token-to-token edit pass on a concrete block (B, L) or (L,)

    Returns:
        (edited block, commit mask); the bitwise diff of input and output equals the mask
    """
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    if bool((x == session.mask_id).any()):
        raise ContractError("AutoEdit works on concrete blocks; input holds mask tokens")
    policy = policy or CommitPolicy()
    logits = session.logits(x)
    if isinstance(policy, FixedCommit):
        proposal, log_probs = propose_tokens(logits, temperature, generator)
        committed = policy.mask.expand_as(x) & (proposal != x)
        new_x = torch.where(committed, proposal, x)
        token_lp = log_probs.gather(-1, proposal.unsqueeze(-1)).squeeze(-1)
    else:
        result = session.commit(logits, x, policy.count, "edit", temperature, generator, clamp=True)
        new_x, committed, token_lp = result
    if trace is not None:
        trace.transitions.append(Transition("edit", x, new_x, token_lp))
        trace.tokens = new_x
    if squeeze:
        return new_x[0], committed[0]
    return new_x, committed


def effective_time(edit_mask: Union[Sequence[bool], torch.Tensor]) -> float:
    """Fraction of the block re-masked by an edit mask"""
    mask = torch.as_tensor(edit_mask, dtype=torch.bool)
    return float(mask.sum()) / mask.shape[-1]


def remask_edit(
    session: DecodeSession,
    x: torch.Tensor,
    edit_mask: Union[Sequence[bool], torch.Tensor],
    cfg: PipelineConfig,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Re-mask the non-goal positions of ``edit_mask`` and re-draft them with the drafting schedule"""
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    mask = torch.as_tensor(edit_mask, dtype=torch.bool) & ~goal_position_mask(ACTION_LEN)
    x_masked = torch.where(mask.expand_as(x), torch.full_like(x, session.mask_id), x)
    trace = DecodeTrace(tokens=x_masked)
    out = _draft_rounds(session, x_masked, cfg.draft_steps, cfg.temperature, generator, trace)
    return out[0] if squeeze else out


def _to_candidate(
    goal_index: int, draw: int, pre: torch.Tensor, post: torch.Tensor, goal: GoalProposal, vocab: Vocabulary
) -> Candidate:
    return Candidate(
        goal_index=goal_index,
        draw_index=draw,
        pre_edit_tokens=pre.tolist(),
        post_edit_tokens=post.tolist(),
        pre_edit=[tuple(p) for p in detokenize_array(pre.numpy(), vocab).tolist()],
        post_edit=[tuple(p) for p in detokenize_array(post.numpy(), vocab).tolist()],
        confidence=goal.probability,
    )


def plan(
    scene_or_session: Union[Scene, DecodeSession],
    model: DenoiserModel,
    cfg: PipelineConfig,
    options: Optional[RuntimeOptions] = None,
    generator: Optional[torch.Generator] = None,
    scorer: Optional[RewardScorer] = None,
) -> PlanResult:
    """
    Goals, then drafts, then cfg.edit_steps AutoEdit rounds per goal

    Standard mode returns the highest-probability goal's edited trajectory.
    Best-of-N mode drafts cfg.draws_per_goal times per goal (draws after the
    first are sampled) and, when the scene is known, selects the candidate
    with the highest reward.
    """
    if isinstance(scene_or_session, DecodeSession):
        session, scene = scene_or_session, None
    else:
        scene = scene_or_session
        session = DecodeSession(model, build_prompt(scene, model.dtype), options)
    if session.goal_factors is None:
        session.prepare()
    goals = propose_goals(session, cfg)
    if not goals:
        raise ContractError("goal head produced no proposal")

    draws = cfg.draws_per_goal if cfg.mode == "best_of_n" else 1
    if draws > 1 and generator is None:
        generator = torch.Generator().manual_seed(0)
    candidates: List[Candidate] = []
    policy = CommitPolicy(cfg.commit_fraction)
    for d in range(draws):
        draw_gen = generator if d > 0 else None
        trace = draft_trajectory(session, goals, cfg, draw_gen)
        pre = trace.tokens
        x = pre
        for _ in range(cfg.edit_steps):
            x, _ = autoedit_round(session, x, policy, cfg.temperature, draw_gen)
        for g, goal in enumerate(goals):
            candidates.append(_to_candidate(g, d, pre[g], x[g], goal, model.vocab))
    candidates.sort(key=lambda c: (c.goal_index, c.draw_index))

    selected = 0
    if scene is not None and (scorer is not None or cfg.mode == "best_of_n"):
        scorer = scorer or reward_scorer
        for c in candidates:
            c.reward = scorer.score(Trajectory(waypoints=c.post_edit, timestep=scene.expert.timestep), scene)
            c.pre_edit_reward = scorer.score(Trajectory(waypoints=c.pre_edit, timestep=scene.expert.timestep), scene)
        if cfg.mode == "best_of_n":
            selected = max(range(len(candidates)), key=lambda i: (candidates[i].reward.aggregate, -i))
    return PlanResult(goals=goals, candidates=candidates, selected=selected)


def shift_plan(prev_plan: Trajectory, motion: EgoMotion, elapsed: float) -> np.ndarray:
    """
    Drop the elapsed waypoints, extend the tail along the last segment and
    re-express everything in the current ego frame
    """
    dt = prev_plan.timestep
    steps = int(round(elapsed / dt))
    if abs(steps * dt - elapsed) > 1e-9 or steps < 0:
        raise ContractError(f"elapsed time {elapsed} is not a multiple of the timestep {dt}")
    if steps >= K_WAYPOINTS:
        raise FullStepFallback(f"elapsed {elapsed}s covers the whole {K_WAYPOINTS * dt}s plan")
    path = prev_plan.with_origin()
    last_step = path[-1] - path[-2]
    tail = path[-1] + np.outer(np.arange(1, steps + 1), last_step)
    shifted = np.vstack([prev_plan.waypoints[steps:], tail])
    return to_frame(shifted, motion.dx, motion.dy, motion.dpsi)


def asd_lite_step(
    prev_plan: Trajectory,
    motion: EgoMotion,
    elapsed: float,
    session: DecodeSession,
    cfg: PipelineConfig,
) -> Trajectory:
    """
    Lite frame: shift and transform the previous plan, keep the linearly
    extrapolated tail as concrete tokens and let the lite edit rounds correct it
    """
    vocab = session.model.vocab
    shifted = shift_plan(prev_plan, motion, elapsed)
    x = torch.from_numpy(tokenize_array(shifted, vocab, clamp=True)).unsqueeze(0)
    if session.cache is None and session.options.prefix_cache:
        session.prepare(need_goals=False)
    policy = CommitPolicy(cfg.commit_fraction)
    for _ in range(cfg.lite_edit_steps):
        x, _ = autoedit_round(session, x, policy)
    return Trajectory(waypoints=detokenize_array(x[0].numpy(), vocab), timestep=prev_plan.timestep)


@dataclass
class ClipRun:
    rewards: List[RewardBreakdown]
    lite_frames: List[int]
    prefill_seconds: List[float]
    decode_seconds: List[float]

    @property
    def mean_aggregate(self) -> float:
        return float(np.mean([r.aggregate for r in self.rewards]))


def run_clip(
    clip: Clip,
    model: DenoiserModel,
    cfg: PipelineConfig,
    mode: Literal["full", "alternating"] = "full",
    options: Optional[RuntimeOptions] = None,
    scorer: Optional[RewardScorer] = None,
) -> ClipRun:
    """Plan every frame of a clip, either full-step every frame or alternating full and lite frames"""
    scorer = scorer or reward_scorer
    single = cfg.model_copy(update={"mode": "standard"})
    prev: Optional[Trajectory] = None
    out = ClipRun(rewards=[], lite_frames=[], prefill_seconds=[], decode_seconds=[])
    for f, scene in enumerate(clip.frames):
        session = DecodeSession(model, build_prompt(scene, model.dtype), options)
        traj = None
        if mode == "alternating" and f % 2 == 1 and prev is not None:
            session.prepare(need_goals=False)
            try:
                traj = asd_lite_step(prev, clip.motions[f], clip.frame_dt, session, cfg)
                out.lite_frames.append(f)
            except FullStepFallback:
                logger.info(f"frame {f}: lite step fell back to a full step")
        if traj is None:
            result = plan(session, model, single)
            traj = Trajectory(waypoints=result.selected_candidate.post_edit, timestep=scene.expert.timestep)
        out.rewards.append(scorer.score(traj, scene))
        out.prefill_seconds.append(session.prefill_seconds)
        out.decode_seconds.append(session.decode_seconds)
        prev = traj
    return out


def plan_tokens(result: PlanResult) -> TokenSequence:
    return TokenSequence(tokens=result.selected_candidate.post_edit_tokens)


def goal_from_endpoint(x: float, y: float, vocab: Vocabulary, probability: float = 1.0) -> GoalProposal:
    """GoalProposal for a known endpoint (e.g. the expert's)"""
    x_tok, y_tok = tokenize_point(x, y, vocab, clamp=True)
    return GoalProposal(x_token=x_tok, y_token=y_tok, probability=probability, position=point_of(x_tok, y_tok, vocab))
