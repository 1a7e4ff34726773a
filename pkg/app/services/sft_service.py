"""
Supervised training: masked drafting, structure-aware correction and the field loss
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel

from ..errors import ContractError, DegenerateInputError, NonFiniteError, RangeError
from ..models.configs import PerturbationConfig, SceneConfig, TrainConfig
from ..models.scene import Scene
from ..models.trajectory import Vocabulary
from ..utils.seeding import RngHierarchy
from .codec_service import tokenize
from .denoiser_service import DenoiserModel, PromptBatch, build_prompt
from .field_service import field_loss, spatial_distribution
from .perturbation_service import PerturbationDraw, sample_perturbation
from .scene_service import dac_cost_field

logger = logging.getLogger(__name__)


def forward_mask(
    x0: torch.Tensor,
    t: float,
    mask_id: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Replace each token independently with ``mask_id`` at probability t"""
    if not 0.0 <= float(t) <= 1.0:
        raise RangeError(f"mask ratio must lie in [0, 1], got {t}")
    if bool((x0 == mask_id).any()):
        raise ContractError("forward masking expects a clean token block")
    draws = torch.rand(x0.shape, generator=generator)
    return torch.where(draws < t, torch.full_like(x0, mask_id), x0)


def forward_mask_batch(
    x0: torch.Tensor,
    t: torch.Tensor,
    mask_id: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Per-row mask ratios t of shape (B,)"""
    if bool(((t < 0) | (t > 1)).any()):
        raise RangeError("mask ratios must lie in [0, 1]")
    draws = torch.rand(x0.shape, generator=generator)
    return torch.where(draws < t.unsqueeze(-1), torch.full_like(x0, mask_id), x0)


def dlm_loss(logits: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Mean NLL of the clean tokens over all L positions"""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), x0.reshape(-1))


def masked_dlm_loss(logits: torch.Tensor, x0: torch.Tensor, x_t: torch.Tensor, mask_id: int) -> torch.Tensor:
    """Masked-positions-only variant, kept for comparison with the all-position loss"""
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), x0.reshape(-1), reduction="none")
    masked = (x_t.reshape(-1) == mask_id).to(nll.dtype)
    return (nll * masked).sum() / masked.sum().clamp(min=1.0)


def sap_loss(logits_on_perturbed: torch.Tensor, x0_clean: torch.Tensor, perturbed: torch.Tensor, mask_id: int) -> torch.Tensor:
    """Mean NLL of the clean tokens given a fully concrete perturbed block"""
    if bool((perturbed == mask_id).any()):
        raise ContractError("structure-aware correction is token-to-token; perturbed input holds mask tokens")
    return dlm_loss(logits_on_perturbed, x0_clean)


def goal_nll(goal_factors: torch.Tensor, x0: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    """NLL of the expert endpoint cell under the factorized joint goal distribution"""
    x_bin = x0[:, -2] - vocab.x_offset
    y_bin = x0[:, -1] - vocab.y_offset
    return F.cross_entropy(goal_factors[:, : vocab.bins_x], x_bin) + F.cross_entropy(
        goal_factors[:, vocab.bins_x :], y_bin
    )


@dataclass
class SupervisedBatch:
    prompt: PromptBatch
    clean: torch.Tensor  # (B, L)
    masked: torch.Tensor  # (B, L)
    perturbed: torch.Tensor  # (B, L)
    cost: torch.Tensor  # (B, H, W)
    mask_ratio: torch.Tensor  # (B,)
    draws: List[PerturbationDraw]

    def __len__(self) -> int:
        return self.clean.shape[0]

    def permute(self, order: Sequence[int]) -> "SupervisedBatch":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        return SupervisedBatch(
            prompt=self.prompt.select(order),
            clean=self.clean[idx],
            masked=self.masked[idx],
            perturbed=self.perturbed[idx],
            cost=self.cost[idx],
            mask_ratio=self.mask_ratio[idx],
            draws=[self.draws[i] for i in order],
        )


class LossBreakdown(BaseModel):
    dlm: float
    sap: float
    field: float
    goal: float
    total: float


def assemble_batch(
    scenes: Sequence[Scene],
    vocab: Vocabulary,
    train_cfg: TrainConfig,
    perturb_cfg: PerturbationConfig,
    scene_cfg: SceneConfig,
    rng: RngHierarchy,
    dtype: torch.dtype = torch.float32,
    cost_cache: Optional[Dict[int, np.ndarray]] = None,
) -> SupervisedBatch:
    """Clean, masked and perturbed token blocks plus cost fields for a list of scenes"""
    np_rng = rng.numpy("perturb")
    clean, perturbed, draws, costs = [], [], [], []
    for scene in scenes:
        clean.append(tokenize(scene.expert, vocab, clamp=True).tokens)
        draw = sample_perturbation(np_rng, perturb_cfg)
        try:
            noisy = draw.apply(scene.expert)
        except DegenerateInputError:
            noisy = scene.expert
        perturbed.append(tokenize(noisy, vocab, clamp=True).tokens)
        draws.append(draw)
        if cost_cache is not None and scene.seed in cost_cache:
            cost = cost_cache[scene.seed]
        else:
            cost = dac_cost_field(scene.grid, scene_cfg.r_dac, scene_cfg.eps_safe).cost
            if cost_cache is not None:
                cost_cache[scene.seed] = cost
        costs.append(cost)
    clean_t = torch.tensor(clean, dtype=torch.long)
    gen = rng.torch("mask")
    lo, hi = train_cfg.mask_ratio
    t = lo + (hi - lo) * torch.rand(len(scenes), generator=gen, dtype=torch.float64)
    masked = forward_mask_batch(clean_t, t, vocab.mask_token_id, gen)
    return SupervisedBatch(
        prompt=build_prompt(scenes, dtype),
        clean=clean_t,
        masked=masked,
        perturbed=torch.tensor(perturbed, dtype=torch.long),
        cost=torch.from_numpy(np.stack(costs)).to(dtype),
        mask_ratio=t,
        draws=draws,
    )


def compute_supervised_loss(
    model: DenoiserModel, batch: SupervisedBatch, cfg: TrainConfig
) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    L_DLM + lambda_SAP L_SAP + lambda_field L_field + lambda_goal goal NLL

    The field term uses the drafting (masked-input) logits over all waypoints.
    """
    vocab = model.vocab
    draft = model(batch.prompt, batch.masked)
    l_dlm = dlm_loss(draft.action_logits, batch.clean)
    l_field = field_loss(spatial_distribution(draft.action_logits, vocab), batch.cost)
    l_goal = goal_nll(draft.goal_factors, batch.clean, vocab)
    if cfg.lambda_sap > 0:
        corrected = model(batch.prompt, batch.perturbed)
        l_sap = sap_loss(corrected.action_logits, batch.clean, batch.perturbed, vocab.mask_token_id)
    else:
        l_sap = torch.zeros((), dtype=l_dlm.dtype)
    total = l_dlm + cfg.lambda_sap * l_sap + cfg.lambda_field * l_field + cfg.lambda_goal * l_goal
    breakdown = LossBreakdown(
        dlm=float(l_dlm), sap=float(l_sap), field=float(l_field), goal=float(l_goal), total=float(total)
    )
    return total, breakdown


def sup_train_step(
    model: DenoiserModel,
    optimizer: torch.optim.Optimizer,
    batch: SupervisedBatch,
    cfg: TrainConfig,
) -> LossBreakdown:
    """One optimizer step on the supervised objective"""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total, breakdown = compute_supervised_loss(model, batch, cfg)
    if not bool(torch.isfinite(total)):
        logger.error(f"non-finite supervised loss at version {model.params_version}: {breakdown.model_dump()}")
        raise NonFiniteError(f"supervised loss is not finite: {breakdown.model_dump()}")
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    model.bump_version()
    return breakdown


def make_optimizer(model: DenoiserModel, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


class SFTTrainer:
    """
    Supervised loop over a fixed scene list.

    The batch of step n depends only on (seed, n) so a resumed run replays
    the exact batches an uninterrupted run would have seen.
    """

    def __init__(
        self,
        model: DenoiserModel,
        scenes: Sequence[Scene],
        train_cfg: TrainConfig,
        perturb_cfg: PerturbationConfig,
        scene_cfg: SceneConfig,
        seed: int,
        optimizer: Optional[torch.optim.Optimizer] = None,
        start_step: int = 0,
    ):
        if not scenes:
            raise ContractError("supervised training needs at least one scene")
        self.model = model
        self.scenes = list(scenes)
        self.train_cfg = train_cfg
        self.perturb_cfg = perturb_cfg
        self.scene_cfg = scene_cfg
        self.rng = RngHierarchy(seed, "sft")
        self.optimizer = optimizer or make_optimizer(model, train_cfg.lr, train_cfg.weight_decay)
        self.step = start_step
        self._costs: Dict[int, np.ndarray] = {}

    def batch_for(self, step: int) -> SupervisedBatch:
        step_rng = self.rng.child(f"step{step}")
        n = min(self.train_cfg.batch_size, len(self.scenes))
        picks = step_rng.numpy("pick").choice(len(self.scenes), size=n, replace=len(self.scenes) < n)
        return assemble_batch(
            [self.scenes[i] for i in picks],
            self.model.vocab,
            self.train_cfg,
            self.perturb_cfg,
            self.scene_cfg,
            step_rng,
            dtype=self.model.dtype,
            cost_cache=self._costs,
        )

    def train_step(self) -> LossBreakdown:
        breakdown = sup_train_step(self.model, self.optimizer, self.batch_for(self.step), self.train_cfg)
        self.step += 1
        return breakdown

    def run(self, steps: int, log_rows: Optional[List[dict]] = None) -> List[dict]:
        rows = log_rows if log_rows is not None else []
        for _ in range(steps):
            step = self.step
            breakdown = self.train_step()
            rows.append({"step": step, **breakdown.model_dump()})
            if step % self.train_cfg.log_every == 0:
                logger.info(
                    f"sft step {step}: total={breakdown.total:.4f} dlm={breakdown.dlm:.4f} "
                    f"sap={breakdown.sap:.4f} field={breakdown.field:.4f} goal={breakdown.goal:.4f}"
                )
        return rows
