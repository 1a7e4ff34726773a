"""
Tests for waypoint spatial distributions and the field loss
"""
import math

import numpy as np
import pytest
import torch

from app.errors import ConfigurationError, SaturationError
from app.services.field_service import field_loss, spatial_distribution, waypoint_distribution
from app.services.scene_service import dac_cost_field


def _random_logits(vocab, batch=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, 16, vocab.coord_vocab_size, generator=gen, dtype=torch.float64)


def _naive_loss(dist: np.ndarray, cost: np.ndarray) -> float:
    total = 0.0
    for b in range(dist.shape[0]):
        for t in range(dist.shape[1]):
            for i in range(dist.shape[2]):
                for j in range(dist.shape[3]):
                    total += -math.log(1.0 - dist[b, t, i, j]) * cost[i, j]
    return total / dist.shape[0]


def test_waypoint_distribution_is_outer_product(tiny_vocab):
    logits = _random_logits(tiny_vocab)
    p = waypoint_distribution(logits, 2, tiny_vocab)
    assert p.shape == (2, tiny_vocab.bins_y, tiny_vocab.bins_x)
    assert torch.allclose(p.sum(dim=(-2, -1)), torch.ones(2, dtype=torch.float64))
    p_x = torch.softmax(logits[0, 4, :16], dim=-1)
    p_y = torch.softmax(logits[0, 5, 16:], dim=-1)
    assert torch.allclose(p[0, 3, 5], p_y[3] * p_x[5])


def test_spatial_distribution_stacks_waypoints(tiny_vocab):
    dist = spatial_distribution(_random_logits(tiny_vocab), tiny_vocab)
    assert dist.shape == (2, 8, tiny_vocab.bins_y, tiny_vocab.bins_x)


def test_field_loss_matches_naive_sum(tiny_vocab, scene):
    dist = spatial_distribution(_random_logits(tiny_vocab, seed=3), tiny_vocab)
    cost = dac_cost_field(scene.grid).cost
    expected = _naive_loss(dist.numpy(), cost)
    assert field_loss(dist, cost).item() == pytest.approx(expected, rel=1e-9)


def test_field_loss_is_zero_without_cost(tiny_vocab):
    dist = spatial_distribution(_random_logits(tiny_vocab), tiny_vocab)
    assert field_loss(dist, np.zeros((16, 16))).item() == 0.0


def test_field_loss_accepts_cost_field_and_unbatched(tiny_vocab, scene):
    dist = spatial_distribution(_random_logits(tiny_vocab, batch=1), tiny_vocab)
    field = dac_cost_field(scene.grid)
    assert field_loss(dist[0], field).item() == pytest.approx(field_loss(dist, field.cost).item())


def test_misaligned_cost_grid(tiny_vocab):
    dist = spatial_distribution(_random_logits(tiny_vocab), tiny_vocab)
    with pytest.raises(ConfigurationError):
        field_loss(dist, np.ones((8, 8)))


def test_saturation_is_clamped_or_raised():
    dist = torch.zeros(1, 8, 4, 4, dtype=torch.float64)
    dist[:, :, 0, 0] = 1.0
    cost = np.zeros((4, 4))
    cost[0, 0] = 1.0
    loss = field_loss(dist, cost)
    assert torch.isfinite(loss)
    assert loss.item() == pytest.approx(-8 * math.log(1e-6), rel=1e-6)
    with pytest.raises(SaturationError):
        field_loss(dist, cost, strict=True)


def test_gradient_pushes_mass_off_costly_cells(tiny_vocab):
    logits = _random_logits(tiny_vocab, batch=1).requires_grad_(True)
    cost = np.zeros((16, 16))
    cost[:, 10:] = 1.0
    field_loss(spatial_distribution(logits, tiny_vocab), cost).backward()
    x_grad = logits.grad[0, 0::2, :16]
    assert bool((x_grad[:, :10] < 0).all())
    assert bool((x_grad[:, 10:].sum(dim=-1) > 0).all())


def test_bad_waypoint_index(tiny_vocab):
    with pytest.raises(ConfigurationError):
        waypoint_distribution(_random_logits(tiny_vocab), 8, tiny_vocab)
