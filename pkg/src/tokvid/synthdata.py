"""Synthetic token videos: a coloured sprite moving over a static striped background.

The background cell ``(h, w)`` holds ``background_ids[(a*h + b*w + c) % K]``
for per-video stripe parameters ``(a, b, c)``, so masked background cells are
recoverable from visible neighbours given precise relative positions. Frame
``t`` places the sprite at ``start + t * velocity`` on a torus. The caption
names the sprite colour and motion direction, so given the caption and earlier
frames every later frame is fully determined.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecError
from .sequence import (TEXT_SIZE, MultimodalSequence, VideoMetadata, encode_sequence, tokenize_text,
                       write_sequence_file)

COLORS = ("red", "green", "blue", "yellow")
DIRECTIONS = {
    "right": (0, 1),
    "left": (0, -1),
    "down": (1, 0),
    "up": (-1, 0),
    "still": (0, 0),
}
N_BACKGROUND = 4


@dataclass(frozen=True)
class MotionSpec:
    grid: tuple[int, int] = (8, 8)
    T: int = 7
    sprite: tuple[int, int] = (2, 2)
    velocity: tuple[int, int] = (0, 1)
    start: tuple[int, int] = (0, 0)
    color: int = 0
    stripes: tuple[int, int, int] = (1, 1, 0)
    background_ids: tuple[int, ...] = tuple(TEXT_SIZE + i for i in range(N_BACKGROUND))
    fps: int = 8

    def sprite_ids(self) -> np.ndarray:
        sh, sw = self.sprite
        base = TEXT_SIZE + N_BACKGROUND + self.color * sh * sw
        return (base + np.arange(sh * sw)).reshape(sh, sw)

    def caption(self) -> str:
        direction = next(k for k, v in DIRECTIONS.items() if v == tuple(self.velocity))
        return f"a {COLORS[self.color]} square moving {direction}"

    def validate(self) -> None:
        H, W = self.grid
        sh, sw = self.sprite
        if sh > H or sw > W or sh < 1 or sw < 1:
            raise SpecError(f"sprite {self.sprite} does not fit grid {self.grid}")
        if self.T < 1:
            raise SpecError("T must be >= 1")
        if tuple(self.velocity) not in DIRECTIONS.values():
            raise SpecError(f"velocity {self.velocity} has no caption")
        if not 0 <= self.color < len(COLORS):
            raise SpecError(f"color index {self.color} out of range")


def visual_vocab_needed(sprite=(2, 2)) -> int:
    """Visual ids used by the generator: background plus every colour's sprite."""
    return N_BACKGROUND + len(COLORS) * sprite[0] * sprite[1]


@dataclass(frozen=True, eq=False)
class Video:
    sequence: MultimodalSequence
    grids: np.ndarray  # (T, H, W) ground-truth ids
    spec: MotionSpec
    seed: int = -1

    def digest(self) -> str:
        return hashlib.sha1(self.sequence.ids.tobytes()).hexdigest()


def render_frames(spec: MotionSpec, background: np.ndarray) -> np.ndarray:
    H, W = spec.grid
    sh, sw = spec.sprite
    sprite = spec.sprite_ids()
    frames = np.repeat(background[None], spec.T, axis=0)
    rr, cc = np.meshgrid(np.arange(sh), np.arange(sw), indexing="ij")
    for t in range(spec.T):
        r0 = spec.start[0] + t * spec.velocity[0]
        c0 = spec.start[1] + t * spec.velocity[1]
        frames[t, (r0 + rr) % H, (c0 + cc) % W] = sprite
    return frames


def render_background(spec: MotionSpec) -> np.ndarray:
    H, W = spec.grid
    a, b, c = spec.stripes
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    bg = np.asarray(spec.background_ids, dtype=np.int64)
    return bg[(a * hh + b * ww + c) % len(bg)]


def make_video(spec: MotionSpec, rng: np.random.Generator | None = None) -> Video:
    """Render ``spec``; ``rng`` is accepted for interface symmetry and unused."""
    spec.validate()
    H, W = spec.grid
    background = render_background(spec)
    frames = render_frames(spec, background)
    meta = VideoMetadata(height_px=8 * H, width_px=8 * W, frames=4 * (spec.T - 1) + 1, fps=spec.fps)
    seq = encode_sequence(meta, tokenize_text(spec.caption()), frames)
    return Video(seq, frames, spec)


@dataclass(frozen=True)
class SpecDistribution:
    """Distribution over motion specs: uniform colour, direction and start."""

    grid: tuple[int, int] = (8, 8)
    T: int = 7
    sprite: tuple[int, int] = (2, 2)
    directions: tuple[str, ...] = tuple(DIRECTIONS)
    fps: int = 8

    def sample(self, rng: np.random.Generator) -> MotionSpec:
        d = self.directions[int(rng.integers(len(self.directions)))]
        return MotionSpec(
            grid=tuple(self.grid), T=self.T, sprite=tuple(self.sprite), velocity=DIRECTIONS[d],
            start=(int(rng.integers(self.grid[0])), int(rng.integers(self.grid[1]))),
            color=int(rng.integers(len(COLORS))), fps=self.fps,
            stripes=tuple(int(v) for v in rng.integers(0, N_BACKGROUND, size=3)),
        )


@dataclass
class Dataset:
    train: list[Video] = field(default_factory=list)
    validation: list[Video] = field(default_factory=list)


def make_dataset(count: int, dist: SpecDistribution, rng: np.random.Generator, max_tries: int = 100) -> Dataset:
    """``count`` distinct videos; the last 10% (at least one) form the validation split."""
    if count < 2:
        raise SpecError("need at least 2 videos to split")
    videos: list[Video] = []
    seen: set[str] = set()
    tries = 0
    while len(videos) < count:
        seed = int(rng.integers(0, 2**63))
        v = make_video(dist.sample(np.random.Generator(np.random.Philox(seed))))
        if v.digest() in seen:
            tries += 1
            if tries > max_tries:
                raise SpecError("spec distribution too narrow for the requested number of distinct videos")
            continue
        seen.add(v.digest())
        videos.append(Video(v.sequence, v.grids, v.spec, seed))
    n_val = max(1, count // 10)
    return Dataset(train=videos[:-n_val], validation=videos[-n_val:])


def write_dataset(ds: Dataset, directory) -> Path:
    """Write every video as a sequence file plus ``manifest.txt`` (``path seed`` per line)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for split, videos in (("train", ds.train), ("validation", ds.validation)):
        for i, v in enumerate(videos):
            name = f"{split}_{i:05d}.seq"
            write_sequence_file(d / name, v.sequence)
            lines.append(f"{name} {v.seed}")
    manifest = d / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
