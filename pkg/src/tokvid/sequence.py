"""Interleaved text/video token layout and the unified codebook.

A sequence is laid out as::

    text... video_start duration fps
        [image_start h_grid w_grid (c c ... c new_line) x H image_end] x T
    video_end

Grid and metadata tokens carry their value inside the id: ``h_grid`` for a
grid of height 32 is ``H_GRID_BASE + 32``, and so on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ParseError, PartitionError, ShapeError

TEXT_SIZE = 65_536
VISUAL_SIZE = 64_000
TOTAL_SIZE = TEXT_SIZE + VISUAL_SIZE

PAD = 0
MASK = 1
VIDEO_START = 2
VIDEO_END = 3
IMAGE_START = 4
IMAGE_END = 5
NEW_LINE = 6
NULL_PROMPT = 7

VALUE_RANGE = 128
DURATION_BASE = 32
FPS_BASE = DURATION_BASE + VALUE_RANGE
H_GRID_BASE = FPS_BASE + VALUE_RANGE
W_GRID_BASE = H_GRID_BASE + VALUE_RANGE
WORD_BASE = W_GRID_BASE + VALUE_RANGE

TAG_TEXT, TAG_STRUCTURAL, TAG_VISUAL = 0, 1, 2


@dataclass(frozen=True)
class Codebook:
    text_size: int = TEXT_SIZE
    visual_size: int = VISUAL_SIZE
    pad: int = PAD
    mask: int = MASK
    video_start: int = VIDEO_START
    video_end: int = VIDEO_END
    video_duration: int = DURATION_BASE
    video_fps: int = FPS_BASE
    image_start: int = IMAGE_START
    image_end: int = IMAGE_END
    h_grid: int = H_GRID_BASE
    w_grid: int = W_GRID_BASE
    new_line: int = NEW_LINE
    null_prompt: int = NULL_PROMPT

    @property
    def total(self) -> int:
        return self.text_size + self.visual_size

    def special_ids(self) -> dict[str, int]:
        return {k: v for k, v in self.__dict__.items() if k not in ("text_size", "visual_size")}


CODEBOOK = Codebook()


def is_visual_id(ids) -> np.ndarray:
    ids = np.asarray(ids)
    return (ids >= TEXT_SIZE) & (ids < TOTAL_SIZE)


def _value_token(base: int, value: int, name: str) -> int:
    if not 0 <= value < VALUE_RANGE:
        raise PartitionError(f"{name} value {value} outside [0, {VALUE_RANGE})")
    return base + value


def _token_value(tok: int, base: int) -> int | None:
    v = int(tok) - base
    return v if 0 <= v < VALUE_RANGE else None


# -- toy text tokenizer ------------------------------------------------------

PROMPT_TEMPLATE = (
    "Generate a video with a resolution of {width}x{height}, consisting of {frames} frames "
    "at {fps} frames per second, according to the following prompt:\n"
)

_WORDS = (
    ["\n", ",", ".", ":", "x"]
    + [str(d) for d in range(10)]
    + "generate a video with resolution of consisting frames at per second according to the "
      "following prompt".split()
    + "red green blue yellow white black orange purple square block dot sprite moving still "
      "static right left up down diagonally and toward stays in place on background".split()
)
VOCABULARY: tuple[str, ...] = tuple(dict.fromkeys(_WORDS))
_WORD_TO_ID = {w: WORD_BASE + i for i, w in enumerate(VOCABULARY)}
_TOKEN_RE = re.compile(r"\d|[A-Za-z]+|\n|[^\sA-Za-z\d]")


def tokenize_text(text: str) -> list[int]:
    """Word-level tokenisation into the reserved word range of the text partition.

    Digits are single tokens and words are lower-cased. Unknown words raise
    ``KeyError`` so that decoding stays exact.
    """
    out = []
    for piece in _TOKEN_RE.findall(text):
        key = piece if piece == "\n" else piece.lower()
        if key not in _WORD_TO_ID:
            raise KeyError(f"word {piece!r} not in the toy vocabulary")
        out.append(_WORD_TO_ID[key])
    return out


def detokenize_text(ids) -> str:
    parts: list[str] = []
    prev = None
    for i in ids:
        w = VOCABULARY[int(i) - WORD_BASE]
        if prev is not None and not (
            w in ",.:\n" or prev == "\n" or (w.isdigit() and prev.isdigit())
        ):
            parts.append(" ")
        parts.append(w)
        prev = w
    return "".join(parts)


def text_vocab_size() -> int:
    """Number of text-partition ids the toy pipeline can emit."""
    return WORD_BASE + len(VOCABULARY)


# -- layout ------------------------------------------------------------------

@dataclass(frozen=True)
class VideoMetadata:
    height_px: int
    width_px: int
    frames: int
    fps: int


def latent_shape(height_px: int, width_px: int, frames: int, compression=(4, 8, 8)):
    """``(T, H_lat, W_lat)`` after causal temporal and spatial compression."""
    ct, ch, cw = compression
    if height_px % ch or width_px % cw:
        raise ShapeError(f"{height_px}x{width_px} not divisible by spatial compression {ch}x{cw}")
    return 1 + (frames - 1) // ct, height_px // ch, width_px // cw


@dataclass(frozen=True)
class FrameSpan:
    index: int
    start: int  # position of image_start
    grid: tuple[int, int]

    @property
    def stop(self) -> int:
        h, w = self.grid
        return self.start + h * w + h + 4

    @property
    def content_start(self) -> int:
        return self.start + 3

    def content_positions(self) -> np.ndarray:
        h, w = self.grid
        r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return (self.content_start + r * (w + 1) + c).ravel()


@dataclass(frozen=True)
class SequenceLayout:
    """Positions of every span, derivable from (text_len, T, H, W) alone."""

    text_len: int
    T: int
    H: int
    W: int

    @property
    def grid(self) -> tuple[int, int]:
        return (self.H, self.W)

    @property
    def n_f(self) -> int:
        return self.H * self.W

    @property
    def video_start(self) -> int:
        return self.text_len

    @property
    def prefix_len(self) -> int:
        """Tokens up to and including the fps token."""
        return self.text_len + 3

    @property
    def frame_len(self) -> int:
        return self.H * self.W + self.H + 4

    @property
    def video_end(self) -> int:
        return self.prefix_len + self.T * self.frame_len

    @property
    def length(self) -> int:
        return self.video_end + 1

    @property
    def visual_span_len(self) -> int:
        return 4 + self.T * self.frame_len

    @property
    def first_content_index(self) -> int:
        return self.prefix_len + 3

    @cached_property
    def frames(self) -> tuple[FrameSpan, ...]:
        return tuple(
            FrameSpan(t, self.prefix_len + t * self.frame_len, self.grid) for t in range(self.T)
        )

    def frame_of(self) -> np.ndarray:
        """Frame index per token; -1 outside frames."""
        out = np.full(self.length, -1, dtype=np.int64)
        for fr in self.frames:
            out[fr.start:fr.stop] = fr.index
        return out

    def content_mask(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        for fr in self.frames:
            m[fr.content_positions()] = True
        return m

    def tags(self) -> np.ndarray:
        t = np.full(self.length, TAG_STRUCTURAL, dtype=np.int8)
        t[: self.text_len] = TAG_TEXT
        t[self.content_mask()] = TAG_VISUAL
        return t


@dataclass(frozen=True, eq=False)
class MultimodalSequence:
    ids: np.ndarray
    tags: np.ndarray
    layout: SequenceLayout

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def text_ids(self) -> np.ndarray:
        return self.ids[: self.layout.text_len]

    def visual_grid(self) -> np.ndarray:
        L = self.layout
        out = np.empty((L.T, L.H, L.W), dtype=np.int64)
        for fr in L.frames:
            out[fr.index] = self.ids[fr.content_positions()].reshape(L.H, L.W)
        return out


def frame_tokens(grid_ids: np.ndarray) -> np.ndarray:
    """Token span of one frame: image_start, grid tokens, rows + new_line, image_end."""
    h, w = grid_ids.shape
    rows = np.concatenate([grid_ids, np.full((h, 1), NEW_LINE, dtype=np.int64)], axis=1).ravel()
    head = [IMAGE_START, _value_token(H_GRID_BASE, h, "h_grid"), _value_token(W_GRID_BASE, w, "w_grid")]
    return np.concatenate([np.array(head, dtype=np.int64), rows, [IMAGE_END]]).astype(np.int64)


def metadata_text(meta: VideoMetadata) -> list[int]:
    return tokenize_text(PROMPT_TEMPLATE.format(
        width=meta.width_px, height=meta.height_px, frames=meta.frames, fps=meta.fps))


def encode_sequence(metadata: VideoMetadata, prompt_tokens, visual_grid) -> MultimodalSequence:
    grid = np.asarray(visual_grid, dtype=np.int64)
    if grid.ndim != 3:
        raise ShapeError(f"visual grid must be T x H x W, got shape {grid.shape}")
    T, H, W = grid.shape
    if T and (H == 0 or W == 0):
        raise ShapeError("frames must have a non-empty grid")
    if grid.size and not is_visual_id(grid).all():
        bad = grid[~is_visual_id(grid)][0]
        raise PartitionError(f"visual id {bad} outside [{TEXT_SIZE}, {TOTAL_SIZE})")
    prompt = [int(p) for p in prompt_tokens]
    for p in prompt:
        if not 0 <= p < TEXT_SIZE:
            raise PartitionError(f"prompt id {p} outside the text partition")
    text = metadata_text(metadata) + prompt
    parts = [
        np.array(text, dtype=np.int64),
        np.array([VIDEO_START, _value_token(DURATION_BASE, T, "duration"),
                  _value_token(FPS_BASE, metadata.fps, "fps")], dtype=np.int64),
    ]
    parts += [frame_tokens(grid[t]) for t in range(T)]
    parts.append(np.array([VIDEO_END], dtype=np.int64))
    ids = np.concatenate(parts)
    layout = SequenceLayout(len(text), T, H if T else 0, W if T else 0)
    return MultimodalSequence(ids=ids, tags=layout.tags(), layout=layout)


def _parse(ids: np.ndarray, violations: list[str] | None = None) -> SequenceLayout:
    """Parse the grammar; raise on the first problem, or collect if ``violations`` is given."""

    def fail(msg, index):
        if violations is None:
            raise ParseError(msg, index)
        violations.append(f"{msg} (at index {index})")

    n = len(ids)
    starts = np.flatnonzero(ids == VIDEO_START)
    if len(starts) == 0:
        fail("missing video_start", n)
        return SequenceLayout(n, 0, 0, 0)
    vs = int(starts[0])
    for i in range(vs):
        if ids[i] in (VIDEO_END, IMAGE_START, IMAGE_END, NEW_LINE) or is_visual_id(ids[i]):
            fail("non-text token inside text span", i)
    if vs + 2 >= n:
        fail("truncated video header", n)
        return SequenceLayout(vs, 0, 0, 0)
    duration = _token_value(ids[vs + 1], DURATION_BASE)
    if duration is None:
        fail("expected video_duration token", vs + 1)
    if _token_value(ids[vs + 2], FPS_BASE) is None:
        fail("expected video_fps token", vs + 2)

    grids: list[tuple[int, int]] = []
    j = vs + 3
    while j < n and ids[j] != VIDEO_END:
        if ids[j] != IMAGE_START:
            fail("expected image_start", j)
            return SequenceLayout(vs, len(grids), *(grids[0] if grids else (0, 0)))
        if j + 2 >= n:
            fail("truncated frame header", j)
            break
        h = _token_value(ids[j + 1], H_GRID_BASE)
        w = _token_value(ids[j + 2], W_GRID_BASE)
        if h is None:
            fail("expected h_grid token", j + 1)
        if w is None:
            fail("expected w_grid token", j + 2)
        k = j + 3
        rows = 0
        count = 0
        while k < n and ids[k] not in (IMAGE_END, VIDEO_END, IMAGE_START):
            if ids[k] == NEW_LINE:
                if w is not None and count != w:
                    fail(f"row {rows} of frame {len(grids)} has {count} content ids, expected {w}", k)
                rows += 1
                count = 0
            elif is_visual_id(ids[k]):
                count += 1
            else:
                fail(f"unexpected token {int(ids[k])} inside frame", k)
            k += 1
        if k >= n or ids[k] != IMAGE_END:
            fail("missing image_end", k)
            if k < n and ids[k] == IMAGE_START:
                j = k
                grids.append((h or 0, w or 0))
                continue
            break
        if count:
            fail("content ids after the last new_line", k)
        if h is not None and rows != h:
            fail(f"frame {len(grids)} has {rows} rows, expected {h}", k)
        grids.append((h or 0, w or 0))
        j = k + 1
    if j >= n or ids[j] != VIDEO_END:
        fail("missing video_end", min(j, n))
    elif j != n - 1:
        fail("tokens after video_end", j + 1)
    for t, g in enumerate(grids[1:], start=1):
        if g != grids[0]:
            k = vs + 3 + sum(a * b + a + 4 for a, b in grids[:t])
            fail(f"frame {t} grid {g} differs from frame 0 grid {grids[0]}", k)
    if duration is not None and duration != len(grids):
        fail(f"duration token says {duration} frames but {len(grids)} present", vs + 1)
    H, W = grids[0] if grids else (0, 0)
    return SequenceLayout(vs, len(grids), H, W)


def decode_layout(sequence) -> SequenceLayout:
    ids = np.asarray(getattr(sequence, "ids", sequence), dtype=np.int64)
    return _parse(ids)


def validate_sequence(sequence: MultimodalSequence) -> list[str]:
    """All invariant violations of ``sequence``; an empty list means valid."""
    ids = np.asarray(sequence.ids, dtype=np.int64)
    tags = np.asarray(sequence.tags)
    out: list[str] = []
    if len(ids) != len(tags):
        out.append(f"partition: {len(ids)} ids but {len(tags)} tags")
    oob = np.flatnonzero((ids < 0) | (ids >= TOTAL_SIZE))
    out += [f"partition: id {int(ids[i])} outside vocabulary (at index {i})" for i in oob]
    n = min(len(ids), len(tags))
    vis = is_visual_id(ids[:n])
    tv = tags[:n] == TAG_VISUAL
    for i in np.flatnonzero(tv & ~vis):
        out.append(f"partition: id {int(ids[i])} tagged visual but outside the visual partition "
                   f"(at index {i})")
    for i in np.flatnonzero(~tv & vis):
        out.append(f"partition: visual id {int(ids[i])} not tagged visual (at index {i})")
    grammar: list[str] = []
    layout = _parse(ids, grammar)
    out += [f"layout: {g}" for g in grammar]
    if not grammar and layout != sequence.layout:
        out.append(f"layout: declared {sequence.layout} but tokens describe {layout}")
    if not grammar and len(tags) == layout.length:
        exp = layout.tags()
        for i in np.flatnonzero(exp != tags):
            if not (exp[i] == TAG_VISUAL) ^ (tags[i] == TAG_VISUAL):
                out.append(f"tags: token {i} tagged {int(tags[i])}, expected {int(exp[i])}")
    return out


def sequence_from_ids(ids) -> MultimodalSequence:
    ids = np.asarray(ids, dtype=np.int64)
    layout = decode_layout(ids)
    return MultimodalSequence(ids=ids, tags=layout.tags(), layout=layout)


# -- file format -------------------------------------------------------------

def write_sequence_file(path, sequence: MultimodalSequence) -> None:
    """Header ``#layout T H W text_len`` then the ids: prefix line, one line per frame, video_end."""
    L = sequence.layout
    ids = sequence.ids
    lines = [f"#layout {L.T} {L.H} {L.W} {L.text_len}",
             " ".join(str(int(i)) for i in ids[: L.prefix_len])]
    for fr in L.frames:
        lines.append(" ".join(str(int(i)) for i in ids[fr.start:fr.stop]))
    lines.append(" ".join(str(int(i)) for i in ids[L.video_end:]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequence_file(path) -> MultimodalSequence:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#layout"):
        raise ParseError(f"{path}: missing '#layout T H W text_len' header", 0)
    try:
        T, H, W, text_len = (int(v) for v in lines[0].split()[1:])
    except ValueError as exc:
        raise ParseError(f"{path}: malformed header {lines[0]!r}", 0) from exc
    ids = np.array([int(v) for line in lines[1:] for v in line.split()], dtype=np.int64)
    seq = sequence_from_ids(ids)
    if seq.layout != SequenceLayout(text_len, T, H, W):
        raise ParseError(f"{path}: header {lines[0]!r} disagrees with tokens ({seq.layout})", 0)
    return seq
