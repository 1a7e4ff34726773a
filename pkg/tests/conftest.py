"""
Shared fixtures: a 16x16 one-meter lattice, a tiny float64 denoiser and a few scenes on it
"""
import numpy as np
import pytest
import torch

from app.models.configs import PipelineConfig, SceneConfig
from app.models.trajectory import Trajectory
from app.services.codec_service import build_vocabulary
from app.services.denoiser_service import build_model, model_config_for
from app.services.scene_service import generate_scene


@pytest.fixture(scope="session")
def tiny_vocab():
    return build_vocabulary(x_range=(0.0, 16.0), y_range=(-8.0, 8.0), bins_x=16, bins_y=16)


@pytest.fixture(scope="session")
def tiny_scene_cfg():
    return SceneConfig(speed_range=(1.0, 2.5), accel_range=(-0.5, 0.3), agent_count=(0, 2), lane_half_width=(2.5, 3.5))


@pytest.fixture(scope="session")
def tiny_model_cfg(tiny_vocab):
    return model_config_for(
        tiny_vocab,
        layers=2,
        heads=2,
        embed_dim=16,
        prompt_ffn_dim=32,
        action_ffn_dim=16,
        patch_size=4,
        dtype="float64",
    )


@pytest.fixture
def tiny_model(tiny_model_cfg, tiny_vocab):
    return build_model(tiny_model_cfg, tiny_vocab, seed=0)


@pytest.fixture
def random_model(tiny_model_cfg, tiny_vocab):
    """Tiny model whose zero-initialized heads are replaced by random weights"""
    model = build_model(tiny_model_cfg, tiny_vocab, seed=1)
    with torch.no_grad(), torch.random.fork_rng(devices=[]):
        torch.manual_seed(7)
        for head in (model.action_head, model.goal_head):
            head.weight.normal_(0.0, 0.5)
            head.bias.normal_(0.0, 0.5)
    return model


@pytest.fixture(scope="session")
def tiny_scenes(tiny_scene_cfg, tiny_vocab):
    return [generate_scene(seed, tiny_scene_cfg, tiny_vocab) for seed in range(6)]


@pytest.fixture
def scene(tiny_scenes):
    return tiny_scenes[0]


@pytest.fixture
def tiny_pipeline():
    return PipelineConfig(n_goals=3, top_k=32, nms_radius=1.2, draft_steps=3, edit_steps=2)


def straight_trajectory(speed: float = 2.0, lateral: float = 0.0, dt: float = 0.5) -> Trajectory:
    t = np.arange(1, 9) * dt
    return Trajectory(waypoints=np.column_stack([speed * t, np.full(8, lateral)]), timestep=dt)


@pytest.fixture
def straight():
    return straight_trajectory()


PARAMETER_GROUPS = {
    "blocks": lambda name: name.startswith("blocks."),
    "embeddings": lambda name: "embed" in name or name.endswith("_pos") or name == "ego_type",
    "heads": lambda name: name.startswith(("action_head.", "goal_head.")),
}


def sample_parameter_entries(model, n: int, seed: int = 0):
    """(name, parameter, flat index) triples drawn round-robin over blocks, embeddings and heads"""
    gen = torch.Generator().manual_seed(seed)
    named = list(model.named_parameters())
    groups = [[(name, p) for name, p in named if member(name)] for member in PARAMETER_GROUPS.values()]
    entries = []
    for i in range(n):
        group = groups[i % len(groups)]
        name, param = group[int(torch.randint(len(group), (1,), generator=gen))]
        entries.append((name, param, int(torch.randint(param.numel(), (1,), generator=gen))))
    return entries


def assert_gradients_match_finite_differences(model, loss_fn, entries, h: float = 1e-6, rel: float = 1e-4, abs_tol: float = 1e-8):
    """Central differences of ``loss_fn()`` against autograd at each sampled entry"""
    model.zero_grad()
    loss_fn().backward()
    for name, param, idx in entries:
        analytic = 0.0 if param.grad is None else param.grad.reshape(-1)[idx].item()
        flat = param.data.view(-1)
        original = flat[idx].item()
        flat[idx] = original + h
        plus = loss_fn().item()
        flat[idx] = original - h
        minus = loss_fn().item()
        flat[idx] = original
        assert (plus - minus) / (2 * h) == pytest.approx(analytic, rel=rel, abs=abs_tol), f"{name}[{idx}]"
