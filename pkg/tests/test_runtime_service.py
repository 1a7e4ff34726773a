"""
Tests for the decoding runtime
"""
import pytest
import torch

from app.errors import ContractError, StaleCacheError
from app.services.codec_service import masked_block
from app.services.denoiser_service import build_prompt
from app.services.runtime_service import (
    DecodeSession,
    RuntimeOptions,
    decode_action_block,
    fused_select_commit,
    prefill_prefix,
    propose_tokens,
    reference_select_commit,
)

MASK = 32


def _masked_tokens(vocab, n=1):
    return torch.from_numpy(masked_block(vocab, (5, 24))).unsqueeze(0).repeat(n, 1)


def _random_case(gen, batch=4, masked_fraction=0.5):
    logits = torch.randn(batch, 16, 32, generator=gen, dtype=torch.float64)
    proposal, log_probs = propose_tokens(logits)
    x = torch.randint(0, 32, (batch, 16), generator=gen)
    holes = torch.rand(batch, 16, generator=gen) < masked_fraction
    x_draft = torch.where(holes, torch.full_like(x, MASK), x)
    return log_probs, proposal, x, x_draft


def _count_prefills(monkeypatch, model):
    calls = []
    original = model.prefill

    def counted(prompt):
        calls.append(1)
        return original(prompt)

    monkeypatch.setattr(model, "prefill", counted)
    return calls


def test_cached_logits_match_uncached(random_model, scene, tiny_vocab):
    prompt = build_prompt(scene, torch.float64)
    tokens = _masked_tokens(tiny_vocab, 3)
    cached = DecodeSession(random_model, prompt, RuntimeOptions(prefix_cache=True))
    plain = DecodeSession(random_model, prompt, RuntimeOptions(prefix_cache=False))
    cached.prepare()
    plain.prepare()
    assert torch.allclose(cached.logits(tokens), plain.logits(tokens), atol=1e-10)
    assert torch.allclose(cached.goal_factors, plain.goal_factors, atol=1e-10)
    assert cached.forward_calls == plain.forward_calls == 1


def test_cache_is_rewound_after_decode(random_model, scene, tiny_vocab):
    cache = prefill_prefix(build_prompt(scene, torch.float64), random_model)
    assert cache.pointer == cache.boundary == random_model.config.prompt_len
    before = [k.clone() for k, _ in cache.layers]
    decode_action_block(cache, _masked_tokens(tiny_vocab), random_model)
    assert cache.pointer == cache.boundary
    assert cache.length == cache.boundary
    assert all(torch.equal(a, k) for a, (k, _) in zip(before, cache.layers))


def test_stale_cache_is_refused(random_model, scene, tiny_vocab):
    cache = prefill_prefix(build_prompt(scene, torch.float64), random_model)
    random_model.bump_version()
    with pytest.raises(StaleCacheError):
        decode_action_block(cache, _masked_tokens(tiny_vocab), random_model)


def test_cache_state_must_match_branches(random_model, scene, tiny_vocab):
    cache = prefill_prefix(build_prompt(scene, torch.float64), random_model)
    with pytest.raises(ContractError):
        decode_action_block(cache, _masked_tokens(tiny_vocab, 2), random_model)
    cache.to_batch(2)
    assert cache.state == "batch"
    assert decode_action_block(cache, _masked_tokens(tiny_vocab, 2), random_model).shape == (2, 16, 32)
    assert cache.to_single().state == "single"


def test_cache_holds_one_scene(random_model, tiny_scenes):
    with pytest.raises(ContractError):
        prefill_prefix(build_prompt(tiny_scenes[:2], torch.float64), random_model)


def test_fused_commit_matches_reference():
    gen = torch.Generator().manual_seed(0)
    batch = 8
    # 1250 draws of 8 rows: 10^4 cases per mode
    for _ in range(1250):
        log_probs, proposal, x, x_draft = _random_case(gen, batch=batch, masked_fraction=float(torch.rand(1, generator=gen)))
        available = (x_draft == MASK).sum(dim=-1)
        n = torch.minimum(available, torch.randint(0, 17, (batch,), generator=gen))
        ref = reference_select_commit(log_probs, x_draft, proposal, n, "draft", MASK)
        fused = fused_select_commit(log_probs, x_draft, proposal, n, "draft", MASK)
        assert torch.equal(ref.tokens, fused.tokens)
        assert torch.equal(ref.committed, fused.committed)

        n_edit = torch.randint(0, 17, (batch,), generator=gen)
        ref = reference_select_commit(log_probs, x, proposal, n_edit, "edit", MASK, clamp=True)
        fused = fused_select_commit(log_probs, x, proposal, n_edit, "edit", MASK, clamp=True)
        assert torch.equal(ref.tokens, fused.tokens)
        assert torch.equal(ref.committed, fused.committed)


def test_draft_commits_most_confident_masked_positions():
    log_probs = torch.log_softmax(torch.zeros(1, 16, 32, dtype=torch.float64), dim=-1).clone()
    confidence = torch.linspace(-3.0, -0.1, 16, dtype=torch.float64)
    log_probs[0, :, 0] = confidence
    proposal = torch.zeros(1, 16, dtype=torch.long)
    x = torch.full((1, 16), MASK)
    x[0, 15] = 7
    result = fused_select_commit(log_probs, x, proposal, 3, "draft", MASK)
    assert result.committed[0].nonzero().flatten().tolist() == [12, 13, 14]
    assert result.tokens[0, 15] == 7


def test_edit_ranks_by_proposal_confidence():
    logits = torch.zeros(1, 16, 32, dtype=torch.float64)
    # position 2: confident proposal over a fairly likely current token
    logits[0, 2, 0], logits[0, 2, 5] = 5.0, 0.0
    # position 4: weak proposal over a very unlikely current token
    logits[0, 4, 0], logits[0, 4, 5] = 0.5, -10.0
    proposal, log_probs = propose_tokens(logits)
    assert proposal[0, 2] == proposal[0, 4] == 0
    x = proposal.clone()
    x[0, 2] = x[0, 4] = 5
    for select in (reference_select_commit, fused_select_commit):
        one = select(log_probs, x, proposal, 1, "edit", MASK)
        assert one.committed[0].nonzero().flatten().tolist() == [2]
        assert one.tokens[0, 2] == 0 and one.tokens[0, 4] == 5
        both = select(log_probs, x, proposal, 2, "edit", MASK)
        assert both.committed[0].nonzero().flatten().tolist() == [2, 4]


def test_edit_never_touches_goal_or_agreeing_positions():
    gen = torch.Generator().manual_seed(3)
    log_probs, proposal, x, _ = _random_case(gen, batch=8)
    result = fused_select_commit(log_probs, x, proposal, 16, "edit", MASK, clamp=True)
    assert not bool(result.committed[:, 14:].any())
    assert not bool((result.committed & (proposal == x)).any())
    assert torch.equal(result.tokens[:, 14:], x[:, 14:])


def test_commit_contracts():
    gen = torch.Generator().manual_seed(1)
    log_probs, proposal, x, x_draft = _random_case(gen, masked_fraction=0.3)
    with pytest.raises(ContractError):
        fused_select_commit(log_probs, x_draft, proposal, 1, "edit", MASK)
    with pytest.raises(ContractError):
        fused_select_commit(log_probs, x_draft, proposal, 17, "draft", MASK)
    with pytest.raises(ContractError):
        reference_select_commit(log_probs, x_draft, proposal, -1, "draft", MASK)
    clamped = fused_select_commit(log_probs, x_draft, proposal, 17, "draft", MASK, clamp=True)
    assert not bool((clamped.tokens == MASK).any())


@pytest.mark.parametrize(
    "options, need_goals, expected",
    [
        (RuntimeOptions(merged_infer=False, prefix_cache=False), True, 2),
        (RuntimeOptions(merged_infer=True, prefix_cache=False), True, 1),
        (RuntimeOptions(merged_infer=True, prefix_cache=True), True, 1),
        (RuntimeOptions(merged_infer=False, prefix_cache=True), True, 2),
        (RuntimeOptions(prefix_cache=False), False, 0),
        (RuntimeOptions(prefix_cache=True), False, 1),
    ],
)
def test_prompt_passes_per_option(monkeypatch, random_model, scene, options, need_goals, expected):
    calls = _count_prefills(monkeypatch, random_model)
    session = DecodeSession(random_model, build_prompt(scene, torch.float64), options)
    goal = session.prepare(need_goals=need_goals)
    assert len(calls) == expected
    assert (goal is None) == (not need_goals)
    assert (session.cache is not None) == options.prefix_cache


def test_session_serves_one_scene(random_model, tiny_scenes):
    with pytest.raises(ContractError):
        DecodeSession(random_model, build_prompt(tiny_scenes[:2], torch.float64))


def test_sampled_proposals_are_reproducible():
    logits = torch.randn(2, 16, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    a, _ = propose_tokens(logits, 1.0, torch.Generator().manual_seed(5))
    b, _ = propose_tokens(logits, 1.0, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)
