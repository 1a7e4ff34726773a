"""
Reinforcement fine-tuning over composed draft-and-edit rollouts
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..errors import ContractError, NonFiniteError
from ..models.configs import PipelineConfig, RLConfig
from ..models.planning import GoalProposal, RewardBreakdown
from ..models.scene import Scene
from ..models.trajectory import ACTION_LEN, Trajectory
from ..utils.seeding import RngHierarchy
from .codec_service import detokenize_array
from .denoiser_service import DenoiserModel, PromptBatch, build_prompt
from .planner_service import CommitPolicy, autoedit_round, draft_trajectory, propose_goals
from .reward_service import RewardScorer, reward_scorer
from .runtime_service import DecodeSession, RuntimeOptions
from .sft_service import make_optimizer

logger = logging.getLogger(__name__)


@dataclass
class Rollout:
    """
    One goal-conditioned draft followed by its edit rounds.

    ``old_log_probs[s]`` holds, per position, the behavior policy's log-prob
    of the token proposed at transition s; at changed positions this is the
    realized token.
    """
    states: List[torch.Tensor]
    old_log_probs: List[torch.Tensor]
    phases: List[str]
    goal_index: int
    draw_index: int
    reward: RewardBreakdown
    pre_edit_reward: RewardBreakdown

    @property
    def n_transitions(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]


@dataclass
class RolloutGroup:
    prompt: PromptBatch
    goals: List[GoalProposal]
    rollouts: List[Rollout] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rollouts)

    def rewards(self, scale: float = 1.0) -> List[float]:
        return [r.reward.aggregate * scale for r in self.rollouts]


def transition_indicator(x_s: torch.Tensor, x_next: torch.Tensor) -> torch.Tensor:
    """1 exactly where the two token states differ"""
    if x_s.shape != x_next.shape:
        raise ContractError(f"token states differ in shape: {tuple(x_s.shape)} vs {tuple(x_next.shape)}")
    return x_s != x_next


def group_advantage(rewards: Sequence[float]) -> List[float]:
    """Rewards centered on the group mean"""
    if len(rewards) < 2:
        raise ContractError(f"group advantage needs at least 2 rollouts, got {len(rewards)}")
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()).tolist()


@torch.no_grad()
def sample_rollout_group(
    scene: Scene,
    model: DenoiserModel,
    cfg: RLConfig,
    pipeline: PipelineConfig,
    generator: Optional[torch.Generator] = None,
    scorer: Optional[RewardScorer] = None,
    options: Optional[RuntimeOptions] = None,
) -> RolloutGroup:
    """
    Sample goals by top-k with NMS, draw ``cfg.draws_per_goal`` drafts per goal
    and edit each; rewards are computed on the post-edit trajectories
    """
    scorer = scorer or reward_scorer
    generator = generator or torch.Generator().manual_seed(scene.seed)
    model.eval()
    session = DecodeSession(model, build_prompt(scene, model.dtype), options)
    session.prepare()
    goals = propose_goals(session, pipeline, generator=generator, n_goals=cfg.n_goals)
    if len(goals) < cfg.n_goals:
        logger.warning(f"scene {scene.seed}: only {len(goals)} of {cfg.n_goals} goal(s) survived, shrinking the group")

    draws = cfg.draws_per_goal
    trace = draft_trajectory(session, goals, pipeline, generator, cfg.temperature, draws=draws)
    pre = trace.tokens
    policy = CommitPolicy(pipeline.commit_fraction)
    x = pre
    for _ in range(pipeline.edit_steps):
        x, _ = autoedit_round(session, x, policy, cfg.temperature, generator, trace)

    dt = scene.expert.timestep
    group = RolloutGroup(prompt=session.prompt, goals=goals)
    for row in range(x.shape[0]):
        post_traj = Trajectory(waypoints=detokenize_array(x[row].numpy(), model.vocab), timestep=dt)
        pre_traj = Trajectory(waypoints=detokenize_array(pre[row].numpy(), model.vocab), timestep=dt)
        group.rollouts.append(
            Rollout(
                states=[s[row] for s in trace.states()],
                old_log_probs=[t.token_log_probs[row] for t in trace.transitions],
                phases=[t.phase for t in trace.transitions],
                goal_index=row // draws,
                draw_index=row % draws,
                reward=scorer.score(post_traj, scene),
                pre_edit_reward=scorer.score(pre_traj, scene),
            )
        )
    return group


def _stack_transitions(group: RolloutGroup, advantages: Sequence[float]):
    before, after, old_lp, adv = [], [], [], []
    for rollout, a in zip(group.rollouts, advantages):
        for s in range(rollout.n_transitions):
            before.append(rollout.states[s])
            after.append(rollout.states[s + 1])
            old_lp.append(rollout.old_log_probs[s])
            adv.append(a)
    return torch.stack(before), torch.stack(after), torch.stack(old_lp), adv


def clipped_surrogate(
    new_lp: torch.Tensor, old_lp: torch.Tensor, changed: torch.Tensor, advantage: torch.Tensor, clip_eps: float
) -> torch.Tensor:
    """Per-position min(r A, clip(r) A) on changed positions, zero elsewhere"""
    old = torch.where(changed, old_lp, new_lp.detach())
    ratio = torch.exp(new_lp - old)
    unclipped = ratio * advantage
    clipped = torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * advantage
    return torch.where(changed, torch.minimum(unclipped, clipped), torch.zeros_like(new_lp))


def kl_to_reference(log_p: torch.Tensor, log_ref: torch.Tensor) -> torch.Tensor:
    """Mean per-position full-vocabulary KL(p || ref)"""
    return (log_p.exp() * (log_p - log_ref)).sum(dim=-1).mean()


def policy_gradient_loss(
    group: RolloutGroup,
    advantages: Sequence[float],
    model: DenoiserModel,
    ref_model: Optional[DenoiserModel],
    cfg: RLConfig,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Clipped-ratio surrogate over the changed positions of every transition,
    normalized by 1/(G L), plus lambda_KL times the KL to the reference policy

    Returns:
        (loss, stats) where stats holds the surrogate, KL and clip fraction
    """
    g = len(group)
    if len(advantages) != g:
        raise ContractError(f"{len(advantages)} advantage(s) for {g} rollout(s)")
    before, after, old_lp, adv = _stack_transitions(group, advantages)
    changed = transition_indicator(before, after)
    bad = changed & ~torch.isfinite(old_lp)
    if bool(bad.any()):
        logger.error(f"recorded behavior log-prob is -inf at {int(bad.sum())} realized token(s)")
        raise NonFiniteError("importance ratio is not finite: a realized token had zero behavior probability")

    prompt = group.prompt.expand(before.shape[0])
    log_p = torch.log_softmax(model(prompt, before).action_logits / cfg.temperature, dim=-1)
    new_lp = log_p.gather(-1, after.unsqueeze(-1)).squeeze(-1)
    advantage = torch.tensor(adv, dtype=new_lp.dtype).unsqueeze(-1)
    surrogate = clipped_surrogate(new_lp, old_lp.to(new_lp.dtype), changed, advantage, cfg.clip_eps)
    pg = -surrogate.sum() / (g * ACTION_LEN)

    if ref_model is not None and cfg.lambda_kl > 0:
        with torch.no_grad():
            log_ref = torch.log_softmax(ref_model(prompt, before).action_logits / cfg.temperature, dim=-1)
        kl = kl_to_reference(log_p, log_ref)
    else:
        kl = torch.zeros((), dtype=pg.dtype)
    loss = pg + cfg.lambda_kl * kl
    with torch.no_grad():
        ratio = torch.exp(new_lp - torch.where(changed, old_lp.to(new_lp.dtype), new_lp))
        clipped = ((ratio - 1).abs() > cfg.clip_eps) & changed
        clip_frac = float(clipped.sum()) / max(int(changed.sum()), 1)
    return loss, {"surrogate": float(pg), "kl": float(kl), "loss": float(loss), "clip_fraction": clip_frac}


def per_transition_loss(
    group: RolloutGroup,
    advantages: Sequence[float],
    model: DenoiserModel,
    cfg: RLConfig,
) -> torch.Tensor:
    """Surrogate term evaluated one rollout and one transition at a time"""
    g = len(group)
    total = None
    for rollout, a in zip(group.rollouts, advantages):
        for s in range(rollout.n_transitions):
            before = rollout.states[s].unsqueeze(0)
            after = rollout.states[s + 1].unsqueeze(0)
            log_p = torch.log_softmax(model(group.prompt, before).action_logits / cfg.temperature, dim=-1)
            new_lp = log_p.gather(-1, after.unsqueeze(-1)).squeeze(-1)
            changed = transition_indicator(before, after)
            old_lp = rollout.old_log_probs[s].unsqueeze(0).to(new_lp.dtype)
            term = clipped_surrogate(new_lp, old_lp, changed, torch.tensor(a, dtype=new_lp.dtype), cfg.clip_eps).sum()
            total = term if total is None else total + term
    if total is None:
        raise ContractError("rollout group holds no transitions")
    return -total / (g * ACTION_LEN)


def frozen_reference(model: DenoiserModel) -> DenoiserModel:
    ref = copy.deepcopy(model)
    ref.eval()
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref


class RLTrainer:
    """On-policy loop: one optimizer step per scene group"""

    def __init__(
        self,
        model: DenoiserModel,
        cfg: RLConfig,
        pipeline: PipelineConfig,
        seed: int,
        ref_model: Optional[DenoiserModel] = None,
        scorer: Optional[RewardScorer] = None,
        options: Optional[RuntimeOptions] = None,
    ):
        self.model = model
        self.cfg = cfg
        self.pipeline = pipeline
        self.ref_model = ref_model or frozen_reference(model)
        self.scorer = scorer or reward_scorer
        self.options = options
        self.optimizer = make_optimizer(model, cfg.lr, cfg.weight_decay)
        self.rng = RngHierarchy(seed, "rl")
        self._flat_groups = 0

    def step(self, scene: Scene, generator: torch.Generator) -> Optional[Dict[str, float]]:
        group = sample_rollout_group(scene, self.model, self.cfg, self.pipeline, generator, self.scorer, self.options)
        if len(group) < 2:
            logger.warning(f"scene {scene.seed}: group of {len(group)} rollout(s) skipped")
            return None
        rewards = group.rewards(self.cfg.reward_scale)
        advantages = group_advantage(rewards)
        if max(rewards) == min(rewards):
            self._flat_groups += 1
            if self._flat_groups == self.cfg.collapse_patience:
                logger.warning(f"reward collapse: {self._flat_groups} consecutive groups with identical rewards")
        else:
            self._flat_groups = 0

        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss, stats = policy_gradient_loss(group, advantages, self.model, self.ref_model, self.cfg)
        if not bool(torch.isfinite(loss)):
            logger.error(f"non-finite RL loss on scene {scene.seed}: {stats}")
            raise NonFiniteError(f"RL loss is not finite: {stats}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.model.bump_version()
        stats["reward_post_edit"] = float(np.mean([r.reward.aggregate for r in group.rollouts]))
        stats["reward_pre_edit"] = float(np.mean([r.pre_edit_reward.aggregate for r in group.rollouts]))
        return stats

    def run_epoch(self, scenes: Sequence[Scene], epoch: int) -> Dict[str, float]:
        epoch_rng = self.rng.child(f"epoch{epoch}")
        collected = []
        for i, scene in enumerate(scenes):
            stats = self.step(scene, epoch_rng.torch(f"scene{i}"))
            if stats is not None:
                collected.append(stats)
        row = {"epoch": epoch, "groups": len(collected)}
        for key in ("reward_pre_edit", "reward_post_edit", "surrogate", "kl", "loss", "clip_fraction"):
            row[key] = float(np.mean([s[key] for s in collected])) if collected else float("nan")
        logger.info(
            f"rl epoch {epoch}: pre-edit={row['reward_pre_edit']:.2f} post-edit={row['reward_post_edit']:.2f} "
            f"loss={row['loss']:.5f} kl={row['kl']:.5f}"
        )
        return row


def rl_train_loop(
    scenes: Sequence[Scene],
    model: DenoiserModel,
    cfg: RLConfig,
    pipeline: PipelineConfig,
    seed: int = 0,
    ref_model: Optional[DenoiserModel] = None,
    scorer: Optional[RewardScorer] = None,
) -> Tuple[DenoiserModel, List[Dict[str, float]]]:
    """Sample, center, step for ``cfg.epochs`` passes over the scenes; returns the model and per-epoch rows"""
    if not scenes:
        raise ContractError("RL training needs at least one scene")
    trainer = RLTrainer(model, cfg, pipeline, seed, ref_model, scorer)
    rows = [trainer.run_epoch(scenes, epoch) for epoch in range(cfg.epochs)]
    model.eval()
    return model, rows
