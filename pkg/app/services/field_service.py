"""
Waypoint spatial distributions and the drivable-area field loss
"""
import logging
from typing import Union

import numpy as np
import torch

from ..errors import ConfigurationError, SaturationError
from ..models.scene import CostField
from ..models.trajectory import K_WAYPOINTS, Vocabulary

logger = logging.getLogger(__name__)

SATURATION_CLAMP = 1.0 - 1e-6


def waypoint_distribution(logits: torch.Tensor, waypoint: int, vocab: Vocabulary) -> torch.Tensor:
    """
    p_xy for one waypoint as the outer product of its coordinate marginals

    Args:
        logits: (..., L, coord_vocab_size) action-block logits
        waypoint: zero-based waypoint index t; uses positions 2t and 2t+1
        vocab: Vocabulary the logits are laid out on

    Returns:
        (..., bins_y, bins_x) grid, row = y bin, column = x bin
    """
    if logits.shape[-1] != vocab.coord_vocab_size:
        raise ConfigurationError(f"logits width {logits.shape[-1]} != vocabulary size {vocab.coord_vocab_size}")
    if not 0 <= waypoint < logits.shape[-2] // 2:
        raise ConfigurationError(f"waypoint index {waypoint} outside the action block")
    p_x = torch.softmax(logits[..., 2 * waypoint, : vocab.bins_x], dim=-1)
    p_y = torch.softmax(logits[..., 2 * waypoint + 1, vocab.bins_x :], dim=-1)
    return p_y.unsqueeze(-1) * p_x.unsqueeze(-2)


def spatial_distribution(logits: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    """(..., K, bins_y, bins_x) stack of per-waypoint distributions"""
    return torch.stack([waypoint_distribution(logits, t, vocab) for t in range(K_WAYPOINTS)], dim=-3)


def field_loss(
    dist: torch.Tensor,
    cost: Union[CostField, np.ndarray, torch.Tensor],
    strict: bool = False,
) -> torch.Tensor:
    """
    Field-weighted log barrier sum_t sum_ij -log(1 - p_t[i, j]) * C[i, j]

    Args:
        dist: (B, T, H, W) or (T, H, W) spatial distributions
        cost: (H, W) or (B, H, W) non-negative cost
        strict: raise SaturationError instead of clamping p near 1 on positive-cost cells

    Returns:
        Scalar loss, summed over waypoints and cells, averaged over the batch
    """
    if isinstance(cost, CostField):
        cost = cost.cost
    cost_t = torch.as_tensor(cost, dtype=dist.dtype, device=dist.device)
    if cost_t.shape[-2:] != dist.shape[-2:]:
        raise ConfigurationError(f"cost grid {tuple(cost_t.shape[-2:])} misaligned with distribution {tuple(dist.shape[-2:])}")
    batched = dist.dim() == 4
    if not batched:
        dist = dist.unsqueeze(0)
    if cost_t.dim() == 2:
        cost_t = cost_t.expand(dist.shape[0], *cost_t.shape)
    cost_t = cost_t.unsqueeze(1)

    saturated = (dist > SATURATION_CLAMP) & (cost_t > 0)
    if bool(saturated.any()):
        if strict:
            raise SaturationError(f"{int(saturated.sum())} cell(s) carry probability ~1 on positive cost")
        logger.debug(f"clamped {int(saturated.sum())} saturated cell(s) in the field loss")
    p = dist.clamp(max=SATURATION_CLAMP)
    per_sample = (-torch.log1p(-p) * cost_t).sum(dim=(1, 2, 3))
    return per_sample.mean()
