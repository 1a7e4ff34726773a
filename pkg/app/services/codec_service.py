"""
Trajectory codec: waypoints <-> interleaved coordinate tokens
"""
import logging
from typing import Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from ..errors import ConfigurationError, ContractError, IncompleteSequenceError, RangeError
from ..models.trajectory import ACTION_LEN, TokenSequence, Trajectory, Vocabulary

logger = logging.getLogger(__name__)


def build_vocabulary(
    x_range: Tuple[float, float] = (0.0, 64.0),
    y_range: Tuple[float, float] = (-16.0, 16.0),
    bins_x: int = 128,
    bins_y: int = 64,
) -> Vocabulary:
    """
    Build a uniform coordinate vocabulary

    Args:
        x_range: (min, max) longitudinal range, max exclusive
        y_range: (min, max) lateral range, max exclusive
        bins_x: Longitudinal bin count
        bins_y: Lateral bin count

    Returns:
        Vocabulary with x ids [0, bins_x), y ids [bins_x, bins_x+bins_y) and the mask id after them
    """
    try:
        return Vocabulary(
            x_min=x_range[0], x_max=x_range[1], y_min=y_range[0], y_max=y_range[1], bins_x=bins_x, bins_y=bins_y
        )
    except ValidationError as e:
        raise ConfigurationError(str(e.errors()[0]["msg"])) from e


def _axis_bins(values: np.ndarray, lo: float, hi: float, n: int, clamp: bool, axis: str) -> np.ndarray:
    if not np.isfinite(values).all():
        raise ContractError(f"non-finite {axis} coordinate")
    width = (hi - lo) / n
    idx = np.floor((values - lo) / width).astype(np.int64)
    outside = (values < lo) | (values >= hi)
    if outside.any() and not clamp:
        bad = values[outside][0]
        raise RangeError(f"{axis}={bad:.3f} outside [{lo}, {hi})")
    # float rounding right below hi can land on n
    return np.clip(idx, 0, n - 1)


def tokenize_array(waypoints: np.ndarray, vocab: Vocabulary, clamp: bool = False) -> np.ndarray:
    """(..., K, 2) waypoints -> (..., 2K) int64 token ids"""
    pts = np.asarray(waypoints, dtype=np.float64)
    xs = _axis_bins(pts[..., 0], vocab.x_min, vocab.x_max, vocab.bins_x, clamp, "x") + vocab.x_offset
    ys = _axis_bins(pts[..., 1], vocab.y_min, vocab.y_max, vocab.bins_y, clamp, "y") + vocab.y_offset
    tokens = np.empty(pts.shape[:-2] + (2 * pts.shape[-2],), dtype=np.int64)
    tokens[..., 0::2] = xs
    tokens[..., 1::2] = ys
    return tokens


def detokenize_array(tokens: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """(..., 2K) token ids -> (..., K, 2) bin centers"""
    tok = np.asarray(tokens, dtype=np.int64)
    if (tok == vocab.mask_token_id).any():
        raise IncompleteSequenceError("token block still contains mask tokens")
    x_ids = tok[..., 0::2] - vocab.x_offset
    y_ids = tok[..., 1::2] - vocab.y_offset
    if (x_ids < 0).any() or (x_ids >= vocab.bins_x).any() or (y_ids < 0).any() or (y_ids >= vocab.bins_y).any():
        raise ContractError("token of the wrong axis in token block")
    out = np.empty(tok.shape[:-1] + (tok.shape[-1] // 2, 2), dtype=np.float64)
    out[..., 0] = vocab.x_min + (x_ids + 0.5) * vocab.bin_width_x
    out[..., 1] = vocab.y_min + (y_ids + 0.5) * vocab.bin_width_y
    return out


def tokenize(traj: Trajectory, vocab: Vocabulary, clamp: bool = False) -> TokenSequence:
    """Interleave [x1, y1, ..., x8, y8]; out-of-range waypoints raise unless ``clamp``"""
    if clamp:
        pts = traj.waypoints
        outside = (
            (pts[:, 0] < vocab.x_min) | (pts[:, 0] >= vocab.x_max) | (pts[:, 1] < vocab.y_min) | (pts[:, 1] >= vocab.y_max)
        )
        if outside.any():
            logger.warning(f"clamped {int(outside.sum())} waypoint(s) into the vocabulary range")
    return TokenSequence(tokens=tokenize_array(traj.waypoints, vocab, clamp).tolist())


def detokenize(seq: TokenSequence, vocab: Vocabulary, timestep: float = 0.5) -> Trajectory:
    return Trajectory(waypoints=detokenize_array(np.array(seq.tokens), vocab), timestep=timestep)


def tokenize_point(x: float, y: float, vocab: Vocabulary, clamp: bool = False) -> Tuple[int, int]:
    """Token pair of a single point (used for goals)"""
    tok = tokenize_array(np.array([[x, y]]), vocab, clamp)
    return int(tok[0]), int(tok[1])


def point_of(x_token: int, y_token: int, vocab: Vocabulary) -> Tuple[float, float]:
    """Bin-center position of a token pair"""
    pt = detokenize_array(np.array([x_token, y_token]), vocab)[0]
    return float(pt[0]), float(pt[1])


def masked_block(vocab: Vocabulary, goal: Sequence[int]) -> np.ndarray:
    """All-mask block with the goal pair pre-filled"""
    block = np.full(ACTION_LEN, vocab.mask_token_id, dtype=np.int64)
    block[-2:] = goal
    return block

