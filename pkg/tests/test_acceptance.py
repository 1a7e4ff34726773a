"""
Directional end-to-end checks on the tiny lattice; run with ``pytest -m slow``
"""
import copy

import numpy as np
import pytest
import torch

from app.models.configs import PerturbationConfig, RLConfig, TrainConfig
from app.services.codec_service import detokenize_array, tokenize
from app.services.denoiser_service import build_model, build_prompt
from app.services.evaluation_service import evaluate_corpus, sweep
from app.services.perturbation_service import perturb_longitudinal
from app.services.planner_service import CommitPolicy, autoedit_round, run_clip
from app.services.rl_service import rl_train_loop
from app.services.runtime_service import DecodeSession
from app.services.scene_service import generate_clip, generate_corpus
from app.services.sft_service import SFTTrainer

pytestmark = pytest.mark.slow

TRAIN = TrainConfig(steps=600, batch_size=16, lr=3e-3, weight_decay=0.0, log_every=100)


@pytest.fixture(scope="module")
def corpus(tiny_scene_cfg, tiny_vocab):
    return generate_corpus(list(range(1000, 1200)), tiny_scene_cfg, tiny_vocab), \
        generate_corpus(list(range(5000, 5040)), tiny_scene_cfg, tiny_vocab)


def _train(model_cfg, vocab, scenes, scene_cfg, train_cfg=TRAIN):
    model = build_model(model_cfg, vocab, seed=0)
    SFTTrainer(model, scenes, train_cfg, PerturbationConfig(), scene_cfg, seed=0).run(train_cfg.steps)
    return model.eval()


@pytest.fixture(scope="module")
def sft_model(tiny_model_cfg, tiny_vocab, corpus, tiny_scene_cfg):
    return _train(tiny_model_cfg, tiny_vocab, corpus[0], tiny_scene_cfg)


def test_field_loss_improves_compliance(sft_model, tiny_model_cfg, tiny_vocab, corpus, tiny_scene_cfg, tiny_pipeline):
    ablated = _train(tiny_model_cfg, tiny_vocab, corpus[0], tiny_scene_cfg, TRAIN.model_copy(update={"lambda_field": 0.0}))
    _, with_field = evaluate_corpus(corpus[1], sft_model, tiny_pipeline)
    _, without_field = evaluate_corpus(corpus[1], ablated, tiny_pipeline)
    assert with_field.single.aggregate > without_field.single.aggregate
    assert with_field.single.dac >= without_field.single.dac


def test_one_edit_round_pulls_compressed_drafts_back(sft_model, tiny_vocab, corpus):
    before, after = [], []
    for scene in corpus[1]:
        expert = scene.expert.waypoints
        draft = torch.tensor(tokenize(perturb_longitudinal(scene.expert, 0.7), tiny_vocab, clamp=True).tokens)
        session = DecodeSession(sft_model, build_prompt(scene, torch.float64))
        session.prepare(need_goals=False)
        edited, _ = autoedit_round(session, draft, CommitPolicy(0.25))
        before.append(np.linalg.norm(detokenize_array(draft.numpy(), tiny_vocab) - expert, axis=-1).mean())
        after.append(np.linalg.norm(detokenize_array(edited.numpy(), tiny_vocab) - expert, axis=-1).mean())
    assert np.mean(after) < np.mean(before)


def test_rl_widens_the_edit_gain(sft_model, corpus, tiny_pipeline):
    _, sft_summary = evaluate_corpus(corpus[1], sft_model, tiny_pipeline)
    cfg = RLConfig(n_goals=3, draws_per_goal=2, epochs=2, lr=3e-4, lambda_kl=0.01)
    model, _ = rl_train_loop(corpus[0][:100], copy.deepcopy(sft_model), cfg, tiny_pipeline, seed=0)
    _, rl_summary = evaluate_corpus(corpus[1], model, tiny_pipeline)
    assert rl_summary.edit_gain > 0
    assert rl_summary.edit_gain > sft_summary.edit_gain


def test_best_of_n_headroom(sft_model, corpus, tiny_pipeline):
    reports, summary = evaluate_corpus(corpus[1], sft_model, tiny_pipeline, best_of_draws=2)
    assert all(r.oracle.aggregate >= r.single.aggregate for r in reports)
    assert summary.oracle.aggregate > summary.single.aggregate


def test_edit_step_sweep_plateaus(sft_model, corpus, tiny_pipeline):
    rows = sweep(corpus[1], sft_model, tiny_pipeline, "edit_steps", [1, 2, 3, 4, 5])
    reward = {int(r.value): r.reward_mean for r in rows}
    # aggregate noise band on the test corpus
    noise = 0.5
    assert reward[2] >= reward[1] - noise
    assert reward[3] >= reward[2] - noise
    assert reward[3] >= reward[1]
    assert abs(reward[4] - reward[3]) <= noise
    assert abs(reward[5] - reward[3]) <= noise


def test_alternating_frames_keep_quality_and_cut_decode_time(sft_model, tiny_scene_cfg, tiny_vocab, tiny_pipeline):
    full_rewards, alternating_rewards = [], []
    full_decode, lite_decode = [], []
    for seed in (5000, 5001, 5002):
        clip = generate_clip(seed, tiny_scene_cfg, n_frames=20, vocab=tiny_vocab)
        full = run_clip(clip, sft_model, tiny_pipeline, "full")
        alternating = run_clip(clip, sft_model, tiny_pipeline, "alternating")
        assert alternating.lite_frames
        full_rewards.append(full.mean_aggregate)
        alternating_rewards.append(alternating.mean_aggregate)
        full_decode += [full.decode_seconds[f] for f in alternating.lite_frames]
        lite_decode += [alternating.decode_seconds[f] for f in alternating.lite_frames]
    assert np.mean(full_rewards) - np.mean(alternating_rewards) <= 1.0
    assert np.mean(lite_decode) < np.mean(full_decode)
