"""
Conditional token denoiser: a small transformer over prompt + action block
"""
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ContractError
from ..models.configs import ModelConfig
from ..models.scene import Instruction, Scene
from ..models.trajectory import ACTION_LEN, TokenSequence, Vocabulary
from .scene_service import rasterize

logger = logging.getLogger(__name__)

AXIS_MASK_LOGIT = -1.0e4
EGO_SCALE = (10.0, 3.0, 0.5)

KVPair = Tuple[torch.Tensor, torch.Tensor]


@dataclass
class PromptBatch:
    """Model-ready conditioning for a batch of scenes"""
    raster: torch.Tensor  # (B, C, H, W)
    instruction: torch.Tensor  # (B,)
    ego: torch.Tensor  # (B, 3)

    def __len__(self) -> int:
        return self.raster.shape[0]

    def expand(self, n: int) -> "PromptBatch":
        if len(self) != 1:
            raise ContractError("only a single-scene prompt can be broadcast")
        return PromptBatch(
            raster=self.raster.expand(n, -1, -1, -1),
            instruction=self.instruction.expand(n),
            ego=self.ego.expand(n, -1),
        )

    def select(self, index: Sequence[int]) -> "PromptBatch":
        idx = torch.as_tensor(list(index), dtype=torch.long)
        return PromptBatch(raster=self.raster[idx], instruction=self.instruction[idx], ego=self.ego[idx])


def build_prompt(scenes: Union[Scene, Sequence[Scene]], dtype: torch.dtype = torch.float32) -> PromptBatch:
    if isinstance(scenes, Scene):
        scenes = [scenes]
    raster = torch.from_numpy(np.stack([rasterize(s) for s in scenes])).to(dtype)
    instruction = torch.tensor([int(s.instruction) for s in scenes], dtype=torch.long)
    ego = torch.tensor([s.ego_state.as_tuple() for s in scenes], dtype=dtype) / torch.tensor(EGO_SCALE, dtype=dtype)
    return PromptBatch(raster=raster, instruction=instruction, ego=ego)


@dataclass(frozen=True)
class AttentionLayout:
    """allow[q, k] is True when query position q may attend to key position k"""
    allow: torch.Tensor
    prompt_len: int
    action_len: int

    def check(self) -> None:
        p = self.prompt_len
        a = self.allow
        if a.shape != (p + self.action_len, p + self.action_len):
            raise ContractError(f"layout shape {tuple(a.shape)} does not match {p}+{self.action_len}")
        if not torch.equal(a[:p, :p], torch.ones(p, p, dtype=torch.bool).tril()):
            raise ContractError("prompt attention must be strictly causal")
        if not bool(a[p:, :].all()):
            raise ContractError("action positions must see every prompt and action position")
        if bool(a[:p, p:].any()):
            raise ContractError("prompt positions must never see action positions")


def build_attention_layout(prompt_len: int, action_len: int = ACTION_LEN) -> AttentionLayout:
    n = prompt_len + action_len
    allow = torch.zeros(n, n, dtype=torch.bool)
    allow[:prompt_len, :prompt_len] = torch.ones(prompt_len, prompt_len, dtype=torch.bool).tril()
    allow[prompt_len:, :] = True
    layout = AttentionLayout(allow=allow, prompt_len=prompt_len, action_len=action_len)
    layout.check()
    return layout


class DenoiserOutput(NamedTuple):
    action_logits: torch.Tensor  # (B, L, V)
    goal_factors: torch.Tensor  # (B, bins_x + bins_y)
    prompt_hidden: torch.Tensor  # (B, P, d) after the last block


class DenoiserBlock(nn.Module):
    """Pre-norm attention block with separate prompt and action FFN branches"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.norm_attn = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm_ffn = nn.LayerNorm(d)
        self.prompt_ffn = nn.Sequential(nn.Linear(d, cfg.prompt_ffn_dim), nn.GELU(), nn.Linear(cfg.prompt_ffn_dim, d))
        action_width = cfg.effective_action_ffn_dim
        self.action_ffn = nn.Sequential(nn.Linear(d, action_width), nn.GELU(), nn.Linear(action_width, d))

    def _qkv(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, t, _ = x.shape
        q, k, v = self.qkv(self.norm_attn(x)).split(self.heads * self.head_dim, dim=-1)
        shape = (b, t, self.heads, self.head_dim)
        return tuple(z.view(shape).transpose(1, 2) for z in (q, k, v))

    def _attend(self, q, k, v, allow: Optional[torch.Tensor]) -> torch.Tensor:
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if allow is not None:
            scores = scores.masked_fill(~allow, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        b, _, t, _ = out.shape
        return self.proj(out.transpose(1, 2).reshape(b, t, self.heads * self.head_dim))

    def forward(self, h: torch.Tensor, layout: AttentionLayout, allow: torch.Tensor) -> torch.Tensor:
        q, k, v = self._qkv(h)
        h = h + self._attend(q, k, v, allow)
        x = self.norm_ffn(h)
        p = layout.prompt_len
        return h + torch.cat([self.prompt_ffn(x[:, :p]), self.action_ffn(x[:, p:])], dim=1)

    def forward_prompt(self, h: torch.Tensor, causal: torch.Tensor) -> Tuple[torch.Tensor, KVPair]:
        q, k, v = self._qkv(h)
        h = h + self._attend(q, k, v, causal)
        return h + self.prompt_ffn(self.norm_ffn(h)), (k, v)

    def forward_action(self, h: torch.Tensor, k_prompt: torch.Tensor, v_prompt: torch.Tensor) -> torch.Tensor:
        q, k, v = self._qkv(h)
        b = h.shape[0]
        keys = torch.cat([k_prompt.expand(b, -1, -1, -1), k], dim=2)
        values = torch.cat([v_prompt.expand(b, -1, -1, -1), v], dim=2)
        h = h + self._attend(q, keys, values, None)
        return h + self.action_ffn(self.norm_ffn(h))


class DenoiserModel(nn.Module):
    """
    Bidirectional denoiser over a 16-token action block.

    The prompt is the patchified scene raster, one instruction token and three
    ego-state tokens. The last prompt position feeds the factorized goal head,
    so goal logits come out of the same pass that fills the prompt cache.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        if (cfg.grid_h, cfg.grid_w, cfg.coord_vocab_size) != (vocab.bins_y, vocab.bins_x, vocab.coord_vocab_size):
            raise ContractError("model config does not match the vocabulary lattice")
        self.config = cfg
        self.vocab = vocab
        self.params_version = 0
        d = cfg.embed_dim
        p = cfg.patch_size
        self.patch_embed = nn.Linear(cfg.raster_channels * p * p, d)
        self.instruction_embed = nn.Embedding(len(Instruction), d)
        self.ego_embed = nn.Linear(1, d)
        self.ego_type = nn.Parameter(torch.randn(3, d) * 0.02)
        self.prompt_pos = nn.Parameter(torch.randn(cfg.prompt_len, d) * 0.02)
        self.token_embed = nn.Embedding(vocab.vocab_size, d)
        self.action_pos = nn.Parameter(torch.randn(cfg.action_len, d) * 0.02)
        self.blocks = nn.ModuleList([DenoiserBlock(cfg) for _ in range(cfg.layers)])
        self.norm_out = nn.LayerNorm(d)
        self.action_head = nn.Linear(d, vocab.coord_vocab_size)
        self.goal_head = nn.Linear(d, vocab.bins_x + vocab.bins_y)
        # uniform predictions at initialization
        for head in (self.action_head, self.goal_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

        self.layout = build_attention_layout(cfg.prompt_len, cfg.action_len)
        self.register_buffer("allow", self.layout.allow, persistent=False)
        self.register_buffer("causal", self.layout.allow[: cfg.prompt_len, : cfg.prompt_len].clone(), persistent=False)
        self.register_buffer("axis_invalid", torch.from_numpy(~vocab.axis_valid_mask()), persistent=False)
        self.to(getattr(torch, cfg.dtype))

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def bump_version(self) -> int:
        self.params_version += 1
        return self.params_version

    def _check_prompt(self, prompt: PromptBatch) -> None:
        cfg = self.config
        expected = (cfg.raster_channels, cfg.grid_h, cfg.grid_w)
        if tuple(prompt.raster.shape[1:]) != expected:
            raise ContractError(f"prompt raster shape {tuple(prompt.raster.shape[1:])} != {expected}")

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.dim() != 2 or tokens.shape[1] != self.config.action_len:
            raise ContractError(f"action block must be (B, {self.config.action_len}), got {tuple(tokens.shape)}")

    def embed_prompt(self, prompt: PromptBatch) -> torch.Tensor:
        self._check_prompt(prompt)
        p = self.config.patch_size
        raster = prompt.raster.to(self.dtype)
        b, c, h, w = raster.shape
        patches = raster.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5).reshape(b, -1, c * p * p)
        instr = self.instruction_embed(prompt.instruction).unsqueeze(1)
        ego = self.ego_embed(prompt.ego.to(self.dtype).unsqueeze(-1)) + self.ego_type
        return torch.cat([self.patch_embed(patches), instr, ego], dim=1) + self.prompt_pos

    def embed_action(self, tokens: torch.Tensor) -> torch.Tensor:
        self._check_tokens(tokens)
        return self.token_embed(tokens) + self.action_pos

    def _action_logits(self, h_action: torch.Tensor) -> torch.Tensor:
        logits = self.action_head(self.norm_out(h_action))
        return logits.masked_fill(self.axis_invalid, AXIS_MASK_LOGIT)

    def _goal_factors(self, h_prompt: torch.Tensor) -> torch.Tensor:
        return self.goal_head(self.norm_out(h_prompt[:, -1]))

    def forward(self, prompt: PromptBatch, tokens: torch.Tensor) -> DenoiserOutput:
        """Full uncached pass over prompt and action block"""
        if len(prompt) != tokens.shape[0]:
            raise ContractError(f"prompt batch {len(prompt)} != token batch {tokens.shape[0]}")
        h = torch.cat([self.embed_prompt(prompt), self.embed_action(tokens)], dim=1)
        for block in self.blocks:
            h = block(h, self.layout, self.allow)
        p = self.config.prompt_len
        return DenoiserOutput(self._action_logits(h[:, p:]), self._goal_factors(h[:, :p]), h[:, :p])

    def prefill(self, prompt: PromptBatch) -> Tuple[List[KVPair], torch.Tensor]:
        """Prompt-only pass: per-layer keys/values and goal factors"""
        h = self.embed_prompt(prompt)
        kvs = []
        for block in self.blocks:
            h, kv = block.forward_prompt(h, self.causal)
            kvs.append(kv)
        return kvs, self._goal_factors(h)

    def goal_pass(self, prompt: PromptBatch) -> torch.Tensor:
        """Goal factors from a dedicated prompt pass"""
        return self.prefill(prompt)[1]

    def decode(self, kvs: Sequence[KVPair], tokens: torch.Tensor) -> torch.Tensor:
        """Action logits from cached prompt keys/values"""
        h = self.embed_action(tokens)
        for block, (k, v) in zip(self.blocks, kvs):
            h = block.forward_action(h, k, v)
        return self._action_logits(h)


def joint_goal_logits(goal_factors: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    """(..., bins_x, bins_y) joint endpoint logits from additive x and y factors"""
    gx = goal_factors[..., : vocab.bins_x]
    gy = goal_factors[..., vocab.bins_x :]
    return gx.unsqueeze(-1) + gy.unsqueeze(-2)


def goal_logits(prompt: PromptBatch, model: DenoiserModel) -> torch.Tensor:
    return joint_goal_logits(model.goal_pass(prompt), model.vocab)


def predict_logits(
    x_partial: Union[TokenSequence, torch.Tensor],
    prompt: PromptBatch,
    model: DenoiserModel,
) -> torch.Tensor:
    """(L, coord_vocab_size) logits for one scene; masked and concrete inputs go through the same pass"""
    tokens = torch.tensor(x_partial.tokens) if isinstance(x_partial, TokenSequence) else x_partial
    if tokens.dim() != 1:
        raise ContractError(f"expected a single token block, got shape {tuple(tokens.shape)}")
    return model(prompt, tokens.unsqueeze(0)).action_logits[0]


def build_model(cfg: ModelConfig, vocab: Vocabulary, seed: int = 0) -> DenoiserModel:
    """Initialize a model from ``seed`` without touching torch's global generator"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DenoiserModel(cfg, vocab)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"built denoiser: {cfg.layers} layers, d={cfg.embed_dim}, {n_params} parameters")
    return model


def model_config_for(vocab: Vocabulary, **overrides) -> ModelConfig:
    """ModelConfig whose grid and vocabulary fields match ``vocab``"""
    return ModelConfig(
        grid_h=vocab.bins_y, grid_w=vocab.bins_x, coord_vocab_size=vocab.coord_vocab_size, **overrides
    )
