"""
Tests for the supervised objective and training loop
"""
import copy
import math

import pytest
import torch

from app.errors import ContractError, RangeError
from app.models.configs import PerturbationConfig, TrainConfig
from app.services.field_service import field_loss, spatial_distribution
from app.services.sft_service import (
    SFTTrainer,
    assemble_batch,
    compute_supervised_loss,
    dlm_loss,
    forward_mask,
    goal_nll,
    make_optimizer,
    masked_dlm_loss,
    sap_loss,
)
from app.utils.seeding import RngHierarchy
from tests.conftest import assert_gradients_match_finite_differences, sample_parameter_entries

LN16 = math.log(16)


@pytest.fixture
def train_cfg():
    return TrainConfig(batch_size=4, lr=3e-3, log_every=10)


@pytest.fixture
def batch(tiny_scenes, tiny_vocab, train_cfg, tiny_scene_cfg):
    return assemble_batch(
        tiny_scenes[:4], tiny_vocab, train_cfg, PerturbationConfig(), tiny_scene_cfg, RngHierarchy(0), torch.float64
    )


def _trainer(model, scenes, train_cfg, scene_cfg, **kwargs):
    return SFTTrainer(model, scenes, train_cfg, PerturbationConfig(), scene_cfg, seed=11, **kwargs)


def test_forward_mask_extremes():
    x0 = torch.arange(16)
    assert torch.equal(forward_mask(x0, 0.0, 99), x0)
    assert torch.all(forward_mask(x0, 1.0, 99) == 99)


def test_forward_mask_contracts():
    x0 = torch.arange(16)
    with pytest.raises(RangeError):
        forward_mask(x0, 1.5, 99)
    x0[3] = 99
    with pytest.raises(ContractError):
        forward_mask(x0, 0.5, 99)


def test_forward_mask_rate():
    gen = torch.Generator().manual_seed(0)
    x0 = torch.zeros(4000, 16, dtype=torch.long)
    masked = forward_mask(x0, 0.3, 7, gen)
    assert abs((masked == 7).double().mean().item() - 0.3) < 0.01


def test_batch_layout(batch, tiny_vocab):
    assert len(batch) == 4
    assert batch.clean.shape == batch.masked.shape == batch.perturbed.shape == (4, 16)
    assert batch.cost.shape == (4, 16, 16)
    assert not bool((batch.perturbed == tiny_vocab.mask_token_id).any())
    keep = batch.masked != tiny_vocab.mask_token_id
    assert torch.equal(batch.masked[keep], batch.clean[keep])
    assert bool(((batch.mask_ratio >= 0.1) & (batch.mask_ratio <= 1.0)).all())


def test_initial_losses_are_uniform(tiny_model, batch, train_cfg):
    out = tiny_model(batch.prompt, batch.masked)
    assert dlm_loss(out.action_logits, batch.clean).item() == pytest.approx(LN16)
    assert masked_dlm_loss(out.action_logits, batch.clean, batch.masked, 32).item() == pytest.approx(LN16)
    assert goal_nll(out.goal_factors, batch.clean, tiny_model.vocab).item() == pytest.approx(2 * LN16)
    _, breakdown = compute_supervised_loss(tiny_model, batch, train_cfg)
    assert breakdown.dlm == pytest.approx(LN16)
    assert breakdown.sap == pytest.approx(LN16)
    assert breakdown.total == pytest.approx(
        LN16 + train_cfg.lambda_sap * LN16 + train_cfg.lambda_field * breakdown.field + 2 * LN16
    )


def test_batch_order_only_permutes_the_losses(random_model, batch, train_cfg):
    order = [2, 0, 3, 1]
    shuffled = batch.permute(order)
    vocab = random_model.vocab
    out = random_model(batch.prompt, batch.masked)
    out_shuffled = random_model(shuffled.prompt, shuffled.masked)
    assert torch.allclose(out_shuffled.action_logits, out.action_logits[order], atol=1e-12)
    assert torch.allclose(out_shuffled.goal_factors, out.goal_factors[order], atol=1e-12)

    pairs = [
        (dlm_loss(out.action_logits, batch.clean), dlm_loss(out_shuffled.action_logits, shuffled.clean)),
        (
            field_loss(spatial_distribution(out.action_logits, vocab), batch.cost),
            field_loss(spatial_distribution(out_shuffled.action_logits, vocab), shuffled.cost),
        ),
        (goal_nll(out.goal_factors, batch.clean, vocab), goal_nll(out_shuffled.goal_factors, shuffled.clean, vocab)),
        (compute_supervised_loss(random_model, batch, train_cfg)[0], compute_supervised_loss(random_model, shuffled, train_cfg)[0]),
    ]
    for a, b in pairs:
        assert a.item() == pytest.approx(b.item(), rel=1e-10)


def test_sap_rejects_masked_input(tiny_model, batch):
    out = tiny_model(batch.prompt, batch.perturbed)
    with pytest.raises(ContractError):
        sap_loss(out.action_logits, batch.clean, batch.masked.clone().fill_(32), 32)


def test_disabled_sap_is_zero(tiny_model, batch):
    _, breakdown = compute_supervised_loss(tiny_model, batch, TrainConfig(lambda_sap=0.0))
    assert breakdown.sap == 0.0


def test_gradient_matches_finite_differences(random_model, batch, train_cfg):
    entries = sample_parameter_entries(random_model, 24, seed=0)
    assert_gradients_match_finite_differences(
        random_model, lambda: compute_supervised_loss(random_model, batch, train_cfg)[0], entries
    )


def test_batches_depend_only_on_step(tiny_model, tiny_scenes, train_cfg, tiny_scene_cfg):
    a = _trainer(tiny_model, tiny_scenes, train_cfg, tiny_scene_cfg).batch_for(5)
    b = _trainer(tiny_model, tiny_scenes, train_cfg, tiny_scene_cfg).batch_for(5)
    assert torch.equal(a.masked, b.masked)
    assert torch.equal(a.perturbed, b.perturbed)


def test_resume_replays_uninterrupted_run(tiny_model_cfg, tiny_vocab, tiny_scenes, train_cfg, tiny_scene_cfg):
    from app.services.denoiser_service import build_model

    straight_through = build_model(tiny_model_cfg, tiny_vocab, seed=3)
    _trainer(straight_through, tiny_scenes, train_cfg, tiny_scene_cfg).run(4)

    first = build_model(tiny_model_cfg, tiny_vocab, seed=3)
    first_trainer = _trainer(first, tiny_scenes, train_cfg, tiny_scene_cfg)
    first_trainer.run(2)
    resumed = copy.deepcopy(first)
    optimizer = make_optimizer(resumed, train_cfg.lr, train_cfg.weight_decay)
    optimizer.load_state_dict(first_trainer.optimizer.state_dict())
    _trainer(resumed, tiny_scenes, train_cfg, tiny_scene_cfg, optimizer=optimizer, start_step=2).run(2)

    for pa, pb in zip(straight_through.parameters(), resumed.parameters()):
        assert torch.allclose(pa, pb, atol=1e-12)
    assert resumed.params_version == 4


def test_training_reduces_the_drafting_loss(tiny_model, tiny_scenes, tiny_scene_cfg):
    cfg = TrainConfig(batch_size=6, lr=1e-2, log_every=100)
    rows = _trainer(tiny_model, tiny_scenes, cfg, tiny_scene_cfg).run(40)
    assert [r["step"] for r in rows] == list(range(40))
    assert rows[0]["dlm"] == pytest.approx(LN16)
    assert sum(r["dlm"] for r in rows[-5:]) / 5 < 0.8 * LN16


def test_trainer_needs_scenes(tiny_model, train_cfg, tiny_scene_cfg):
    with pytest.raises(ContractError):
        _trainer(tiny_model, [], train_cfg, tiny_scene_cfg)


def test_bad_mask_ratio():
    with pytest.raises(ValueError):
        TrainConfig(mask_ratio=(0.6, 0.2))
