"""
Decoding runtime: shared-prefix cache, select-rank-commit and decode sessions
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, Literal, NamedTuple, Optional, Tuple, Union

import torch
from pydantic import BaseModel

from ..errors import ContractError, StaleCacheError
from ..models.trajectory import GOAL_POSITIONS
from .denoiser_service import DenoiserModel, KVPair, PromptBatch

logger = logging.getLogger(__name__)

CommitMode = Literal["draft", "edit"]


@dataclass
class PrefixCache:
    """
    Per-layer prompt keys/values.

    Entries only ever cover prompt positions; action keys/values live for the
    duration of one decode call and the pointer is rewound to ``boundary``.
    """
    layers: List[KVPair]
    boundary: int
    params_version: int
    goal_factors: Optional[torch.Tensor] = None
    state: Literal["single", "batch"] = "single"
    batch_size: int = 1
    pointer: int = field(init=False)

    def __post_init__(self):
        self.pointer = self.boundary

    @property
    def length(self) -> int:
        return self.layers[0][0].shape[2] if self.layers else 0

    def to_batch(self, n: int) -> "PrefixCache":
        """Broadcast the single stored prefix across n drafting branches"""
        if n < 1:
            raise ContractError(f"batch size must be positive, got {n}")
        self.state = "batch" if n > 1 else "single"
        self.batch_size = n
        return self

    def to_single(self) -> "PrefixCache":
        return self.to_batch(1)

    def validate(self, model: DenoiserModel) -> None:
        if self.params_version != model.params_version:
            raise StaleCacheError(
                f"cache built for params version {self.params_version}, model is at {model.params_version}"
            )


def prefill_prefix(prompt: PromptBatch, model: DenoiserModel) -> PrefixCache:
    """One prompt pass producing the cache and the goal logits together"""
    if len(prompt) != 1:
        raise ContractError("a prefix cache holds exactly one scene prompt")
    kvs, goal = model.prefill(prompt)
    return PrefixCache(
        layers=[(k.detach(), v.detach()) for k, v in kvs],
        boundary=model.config.prompt_len,
        params_version=model.params_version,
        goal_factors=goal.detach()[0],
    )


def decode_action_block(cache: PrefixCache, tokens: torch.Tensor, model: DenoiserModel) -> torch.Tensor:
    """Logits for an action block (B, L) reusing the cached prompt; the cache itself is never written"""
    cache.validate(model)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[0] != cache.batch_size:
        raise ContractError(f"cache is in {cache.state} state for {cache.batch_size} branch(es), got {tokens.shape[0]}")
    cache.pointer = cache.boundary + tokens.shape[1]
    try:
        return model.decode(cache.layers, tokens)
    finally:
        cache.pointer = cache.boundary


class CommitResult(NamedTuple):
    tokens: torch.Tensor  # (B, L) updated block
    committed: torch.Tensor  # (B, L) bool, positions written
    token_log_probs: torch.Tensor  # (B, L) log-prob of each position's proposal


def goal_position_mask(length: int, device=None) -> torch.Tensor:
    mask = torch.zeros(length, dtype=torch.bool, device=device)
    mask[list(GOAL_POSITIONS)] = True
    return mask


def propose_tokens(
    logits: torch.Tensor,
    temperature: float = 1.0,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-position proposal (argmax, or a sample when a generator is given) and the policy log-probs"""
    log_probs = torch.log_softmax(logits / temperature, dim=-1)
    if generator is None:
        proposal = log_probs.argmax(dim=-1)
    else:
        flat = log_probs.exp().reshape(-1, log_probs.shape[-1])
        proposal = torch.multinomial(flat.float(), 1, generator=generator).reshape(log_probs.shape[:-1])
    return proposal, log_probs


def commit_keys(
    log_probs: torch.Tensor, x: torch.Tensor, proposal: torch.Tensor, mode: CommitMode, mask_id: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Ranking key (higher commits first) and eligibility per position.

    Both modes rank by the proposal's log-prob. Draft considers masked
    positions; edit considers non-goal positions whose proposal differs from
    the current token.
    """
    key = log_probs.gather(-1, proposal.unsqueeze(-1)).squeeze(-1)
    if mode == "draft":
        eligible = x == mask_id
    else:
        eligible = (proposal != x) & ~goal_position_mask(x.shape[-1], x.device)
    return key, eligible


def _check_commit(x: torch.Tensor, n: torch.Tensor, eligible: torch.Tensor, mode: CommitMode, mask_id: int,
                  clamp: bool) -> torch.Tensor:
    if mode == "edit" and bool((x == mask_id).any()):
        raise ContractError("edit commits need a fully concrete block")
    if bool((n < 0).any()):
        raise ContractError("commit count must be non-negative")
    available = eligible.sum(dim=-1)
    if clamp:
        return torch.minimum(n, available)
    if bool((n > available).any()):
        raise ContractError(f"cannot commit {n.tolist()} of {available.tolist()} eligible position(s)")
    return n


def _as_counts(n_commit: Union[int, torch.Tensor], batch: int) -> torch.Tensor:
    n = torch.as_tensor(n_commit, dtype=torch.long)
    return n.expand(batch).clone() if n.dim() == 0 else n


def reference_select_commit(
    log_probs: torch.Tensor,
    x: torch.Tensor,
    proposal: torch.Tensor,
    n_commit,
    mode: CommitMode,
    mask_id: int,
    clamp: bool = False,
) -> CommitResult:
    """Score, rank in Python, then write token by token"""
    key, eligible = commit_keys(log_probs, x, proposal, mode, mask_id)
    n = _as_counts(n_commit, x.shape[0])
    n = _check_commit(x, n, eligible, mode, mask_id, clamp)
    out = x.clone()
    committed = torch.zeros_like(x, dtype=torch.bool)
    for b in range(x.shape[0]):
        ranked = sorted(
            (-float(key[b, i]), i) for i in range(x.shape[1]) if bool(eligible[b, i])
        )
        for _, i in ranked[: int(n[b])]:
            out[b, i] = proposal[b, i]
            committed[b, i] = True
    token_lp = log_probs.gather(-1, proposal.unsqueeze(-1)).squeeze(-1)
    return CommitResult(out, committed, token_lp)


def fused_select_commit(
    log_probs: torch.Tensor,
    x: torch.Tensor,
    proposal: torch.Tensor,
    n_commit,
    mode: CommitMode,
    mask_id: int,
    clamp: bool = False,
) -> CommitResult:
    """Single vectorized select-rank-commit, token-identical to :func:`reference_select_commit`"""
    key, eligible = commit_keys(log_probs, x, proposal, mode, mask_id)
    n = _as_counts(n_commit, x.shape[0])
    n = _check_commit(x, n, eligible, mode, mask_id, clamp)
    sort_key = torch.where(eligible, -key, torch.full_like(key, float("inf")))
    order = torch.sort(sort_key, dim=-1, stable=True).indices
    rank = torch.empty_like(order).scatter_(-1, order, torch.arange(x.shape[1]).expand_as(order))
    committed = (rank < n.unsqueeze(-1)) & eligible
    token_lp = log_probs.gather(-1, proposal.unsqueeze(-1)).squeeze(-1)
    return CommitResult(torch.where(committed, proposal, x), committed, token_lp)


class RuntimeOptions(BaseModel):
    merged_infer: bool = True
    prefix_cache: bool = True
    fused_commit: bool = True


class DecodeSession:
    """
    One planning session for one scene prompt.

    Tracks wall time spent in the prompt phase (prefill and goal decision) and
    in action-block decoding separately.
    """

    def __init__(self, model: DenoiserModel, prompt: PromptBatch, options: Optional[RuntimeOptions] = None):
        if len(prompt) != 1:
            raise ContractError("a decode session serves exactly one scene")
        self.model = model
        self.prompt = prompt
        self.options = options or RuntimeOptions()
        self.cache: Optional[PrefixCache] = None
        self.goal_factors: Optional[torch.Tensor] = None
        self.prefill_seconds = 0.0
        self.decode_seconds = 0.0
        self.forward_calls = 0

    @property
    def mask_id(self) -> int:
        return self.model.vocab.mask_token_id

    @torch.no_grad()
    def prepare(self, need_goals: bool = True) -> Optional[torch.Tensor]:
        """Prompt phase; returns goal factor logits when ``need_goals``"""
        start = time.perf_counter()
        goal = None
        cache = None
        # unmerged: the prefill and the goal decision are separate prompt passes
        if self.options.prefix_cache or (need_goals and not self.options.merged_infer):
            cache = prefill_prefix(self.prompt, self.model)
        if need_goals:
            goal = cache.goal_factors if self.options.merged_infer and cache is not None else self.model.goal_pass(self.prompt)[0]
        self.cache = cache if self.options.prefix_cache else None
        self.goal_factors = goal
        self.prefill_seconds += time.perf_counter() - start
        return self.goal_factors

    @torch.no_grad()
    def logits(self, tokens: torch.Tensor) -> torch.Tensor:
        start = time.perf_counter()
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if self.cache is not None:
            self.cache.to_batch(tokens.shape[0])
            out = decode_action_block(self.cache, tokens, self.model)
        else:
            out = self.model(self.prompt.expand(tokens.shape[0]), tokens).action_logits
        self.forward_calls += 1
        self.decode_seconds += time.perf_counter() - start
        return out

    def commit(
        self,
        logits: torch.Tensor,
        x: torch.Tensor,
        n_commit,
        mode: CommitMode,
        temperature: float = 1.0,
        generator: Optional[torch.Generator] = None,
        clamp: bool = False,
    ) -> CommitResult:
        start = time.perf_counter()
        proposal, log_probs = propose_tokens(logits, temperature, generator)
        select = fused_select_commit if self.options.fused_commit else reference_select_commit
        result = select(log_probs, x, proposal, n_commit, mode, self.mask_id, clamp)
        self.decode_seconds += time.perf_counter() - start
        return result

