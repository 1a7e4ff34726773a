"""
Tests for the trajectory codec
"""
import logging

import numpy as np
import pytest

from app.errors import ConfigurationError, ContractError, IncompleteSequenceError, RangeError
from app.models.trajectory import Trajectory, TokenSequence
from app.services.codec_service import (
    build_vocabulary,
    detokenize,
    detokenize_array,
    masked_block,
    point_of,
    tokenize,
    tokenize_point,
)


def test_default_vocabulary_layout():
    vocab = build_vocabulary()
    assert vocab.bins_x == 128 and vocab.bins_y == 64
    assert vocab.coord_vocab_size == 192
    assert vocab.mask_token_id == 192
    assert vocab.vocab_size == 193
    assert vocab.bin_width_x == pytest.approx(0.5)
    assert vocab.bin_width_y == pytest.approx(0.5)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"bins_x": 0},
        {"bins_y": -1},
        {"x_range": (5.0, 5.0)},
        {"y_range": (3.0, -3.0)},
    ],
)
def test_bad_vocabulary_is_a_configuration_error(kwargs):
    with pytest.raises(ConfigurationError):
        build_vocabulary(**kwargs)


def test_tokens_interleave_axes(tiny_vocab, straight):
    seq = tokenize(straight, tiny_vocab)
    assert len(seq.tokens) == 16
    assert all(0 <= t < 16 for t in seq.tokens[0::2])
    assert all(16 <= t < 32 for t in seq.tokens[1::2])
    seq.check_layout(tiny_vocab)


def test_round_trip_within_half_bin(tiny_vocab):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pts = np.column_stack([rng.uniform(0.0, 16.0, 8), rng.uniform(-8.0, 8.0, 8)])
        pts = np.clip(pts, [0.0, -8.0], [16.0 - 1e-9, 8.0 - 1e-9])
        back = detokenize(tokenize(Trajectory(waypoints=pts), tiny_vocab), tiny_vocab)
        assert np.all(np.abs(back.waypoints - pts) <= 0.5 + 1e-12)


def test_bin_edges(tiny_vocab):
    # lower edge is inclusive, a point on an interior edge goes to the upper bin
    assert tokenize_point(0.0, -8.0, tiny_vocab) == (0, 16)
    assert tokenize_point(3.0, 0.0, tiny_vocab) == (3, 16 + 8)
    assert tokenize_point(15.999, 7.999, tiny_vocab) == (15, 31)


def test_out_of_range_raises_unless_clamped(tiny_vocab, caplog):
    traj = Trajectory(waypoints=np.column_stack([np.linspace(2, 20, 8), np.zeros(8)]))
    with pytest.raises(RangeError):
        tokenize(traj, tiny_vocab)
    with caplog.at_level(logging.WARNING, logger="app.services.codec_service"):
        seq = tokenize(traj, tiny_vocab, clamp=True)
    assert seq.tokens[-2] == 15
    assert [r.levelno for r in caplog.records] == [logging.WARNING]
    assert "clamped 2 waypoint(s)" in caplog.text


def test_upper_edge_is_out_of_range(tiny_vocab):
    with pytest.raises(RangeError):
        tokenize_point(16.0, 0.0, tiny_vocab)


def test_detokenize_rejects_masks(tiny_vocab):
    block = masked_block(tiny_vocab, (4, 20))
    with pytest.raises(IncompleteSequenceError):
        detokenize_array(block, tiny_vocab)


def test_detokenize_rejects_wrong_axis(tiny_vocab, straight):
    tokens = list(tokenize(straight, tiny_vocab).tokens)
    tokens[0], tokens[1] = tokens[1], tokens[0]
    with pytest.raises(ContractError):
        detokenize_array(np.array(tokens), tiny_vocab)
    with pytest.raises(ContractError):
        TokenSequence(tokens=tokens).check_layout(tiny_vocab)


def test_token_sequence_length_is_checked():
    with pytest.raises(ValueError):
        TokenSequence(tokens=[0] * 15)


def test_non_finite_waypoints_are_rejected():
    pts = np.zeros((8, 2))
    pts[3, 0] = np.nan
    with pytest.raises(ValueError):
        Trajectory(waypoints=pts)


def test_masked_block_keeps_goal(tiny_vocab):
    block = masked_block(tiny_vocab, (7, 25))
    seq = TokenSequence(tokens=block)
    assert seq.goal == (7, 25)
    assert seq.masked_positions(tiny_vocab) == list(range(14))
    assert not seq.is_complete(tiny_vocab)


def test_point_of_is_bin_center(tiny_vocab):
    assert point_of(3, 16 + 8, tiny_vocab) == (3.5, 0.5)
