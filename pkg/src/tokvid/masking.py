"""Tube masks for AR-DF and block-structured attention masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .sequence import SequenceLayout


@dataclass(frozen=True, eq=False)
class MaskPattern:
    keep: np.ndarray  # (H, W) bool, True = observed
    ratio: float

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.keep.shape)

    def to_text(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.keep)

    @classmethod
    def from_text(cls, text: str, ratio: float = float("nan")) -> "MaskPattern":
        rows = [r.strip() for r in text.strip().splitlines()]
        keep = np.array([[c == "1" for c in r] for r in rows], dtype=bool)
        return cls(keep, ratio)


def _check_ratio(rho: float) -> None:
    if not 0.0 <= rho <= 1.0:
        raise ArgumentError(f"mask ratio must lie in [0, 1], got {rho}")


def sample_tube_mask(grid: tuple[int, int], rho: float, rng: np.random.Generator) -> MaskPattern:
    """One spatial pattern per video; each cell kept with probability ``1 - rho``."""
    _check_ratio(rho)
    keep = rng.random(grid) >= rho
    return MaskPattern(keep, float(rho))


def sample_train_ratio(rho_tra: float, rng: np.random.Generator) -> float:
    """Per-video training mask ratio, ``Uniform([rho_tra, 1])``."""
    _check_ratio(rho_tra)
    return float(rho_tra + (1.0 - rho_tra) * rng.random())


def sample_random_mask(shape: tuple[int, int, int], rho: float, rng: np.random.Generator) -> np.ndarray:
    """Globally random keep mask over ``(T, H, W)``: no tube structure."""
    _check_ratio(rho)
    return rng.random(shape) >= rho


def apply_tube(frames, pattern: MaskPattern, mask_id: int) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[1:] != pattern.keep.shape:
        raise ShapeError(f"frames {frames.shape} do not match mask grid {pattern.keep.shape}")
    return np.where(pattern.keep[None], frames, mask_id)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Compact block description: query ``q`` may attend key ``k`` iff
    ``key_blocks[k] <= query_blocks[q]``.

    Causal text tokens are singleton blocks; each frame is one block.
    """

    query_blocks: np.ndarray
    key_blocks: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.query_blocks), len(self.key_blocks))

    def dense(self) -> np.ndarray:
        return self.key_blocks[None, :] <= self.query_blocks[:, None]

    def restrict(self, queries, keys) -> "AttentionMask":
        return AttentionMask(self.query_blocks[queries], self.key_blocks[keys])

    def to_text(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.dense())


def block_ids(layout: SequenceLayout) -> np.ndarray:
    """Per-token block index for the temporal causal mask.

    Tokens before the first frame (text, video_start, duration, fps) are
    causal singletons; a frame's tokens (structural ones included) share a
    block; video_end closes the sequence as its own block.
    """
    b = np.arange(layout.length, dtype=np.int64)
    P = layout.prefix_len
    for fr in layout.frames:
        b[fr.start:fr.stop] = P + fr.index
    b[layout.video_end] = P + layout.T
    return b


def build_temporal_causal_mask(layout: SequenceLayout) -> AttentionMask:
    b = block_ids(layout)
    return AttentionMask(b, b)


def build_text_causal_mask(n_text: int) -> AttentionMask:
    if n_text < 0:
        raise ArgumentError("n_text must be nonnegative")
    b = np.arange(n_text, dtype=np.int64)
    return AttentionMask(b, b)
