"""Autoregressive discrete diffusion forcing: training and frame-wise decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import numerics
from .errors import ArgumentError, EmptyLossError, InvariantError, NumericError, PartitionError
from .masking import (AttentionMask, block_ids, build_text_causal_mask, sample_random_mask,
                      sample_train_ratio, sample_tube_mask)
from .model import KVCache, ToyDecoder, forward
from .rope import assign_positions
from .sequence import (DURATION_BASE, FPS_BASE, MASK, NULL_PROMPT, TAG_VISUAL, TEXT_SIZE,
                       VIDEO_START, WORD_BASE, VOCABULARY, MultimodalSequence, SequenceLayout,
                       frame_tokens, is_visual_id)

MASK_MODES = ("tube", "random")
_NEWLINE_WORD = WORD_BASE + VOCABULARY.index("\n")


@dataclass(frozen=True)
class SamplerConfig:
    rho_inf: float = 0.7
    n_steps: int = 50
    cfg_scale: float = 16.0
    gumbel_temperature: float = 1.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho_inf <= 1.0:
            raise ArgumentError(f"rho_inf must lie in [0, 1], got {self.rho_inf}")
        if self.n_steps < 1:
            raise ArgumentError("n_steps must be >= 1")
        if self.cfg_scale < 0 or self.gumbel_temperature < 0 or self.temperature <= 0:
            raise ArgumentError("cfg_scale and gumbel_temperature must be >= 0, temperature > 0")


@dataclass(frozen=True)
class TrainConfig:
    rho_tra: float = 0.7
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    chunk_size: int = 2000
    steps: int = 500
    batch_size: int = 8
    caption_drop: float = 0.1
    grad_clip: float = 1.0
    warmup_steps: int = 20
    image_steps: int = 0
    mask_mode: str = "tube"

    def __post_init__(self):
        if not 0.0 <= self.rho_tra <= 1.0:
            raise ArgumentError(f"rho_tra must lie in [0, 1], got {self.rho_tra}")
        if self.chunk_size < 1:
            raise ArgumentError("chunk_size must be >= 1")
        if self.mask_mode not in MASK_MODES:
            raise ArgumentError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")


@dataclass
class StepRecord:
    frame: int
    n: int
    alpha: float
    U: int
    revealed: int
    min_confidence: float
    max_confidence: float


# -- loss ----------------------------------------------------------------------

def chunked_cross_entropy(logits: torch.Tensor, targets, loss_positions, chunk_size: int = 2000,
                          frame_index=None):
    """Mean masked-token cross-entropy over the visual vocabulary.

    Rows are processed ``chunk_size`` at a time, each chunk upcast to float64
    before the log-softmax. Returns ``(mean_loss, {frame: mean_loss})``; the
    per-frame breakdown is empty when ``frame_index`` is not given.
    """
    if chunk_size < 1:
        raise ArgumentError("chunk_size must be >= 1")
    V = logits.shape[-1]
    logits = logits.reshape(-1, V)
    tgt = torch.as_tensor(np.asarray(targets), dtype=torch.long).reshape(-1)
    sel = torch.as_tensor(np.asarray(loss_positions), dtype=torch.bool).reshape(-1)
    if tgt.numel() != logits.shape[0] or sel.numel() != logits.shape[0]:
        raise ArgumentError("logits, targets and loss_positions must be aligned")
    count = int(sel.sum())
    if count == 0:
        raise EmptyLossError("no loss positions selected")
    cls = tgt - TEXT_SIZE
    if bool(((cls[sel] < 0) | (cls[sel] >= V)).any()):
        raise PartitionError("a loss target lies outside the visual vocabulary")
    frames = None
    if frame_index is not None:
        frames = torch.as_tensor(np.asarray(frame_index), dtype=torch.long).reshape(-1)
    total = logits.new_zeros((), dtype=torch.float64)
    frame_sums: dict[int, float] = {}
    frame_counts: dict[int, int] = {}
    for start in range(0, logits.shape[0], chunk_size):
        s = sel[start:start + chunk_size]
        if not bool(s.any()):
            continue
        rows = logits[start:start + chunk_size][s].to(torch.float64)
        nll = -torch.log_softmax(rows, dim=-1).gather(1, cls[start:start + chunk_size][s][:, None])[:, 0]
        total = total + nll.sum()
        if frames is not None:
            fr = frames[start:start + chunk_size][s]
            d = nll.detach()
            for f in torch.unique(fr).tolist():
                m = fr == f
                frame_sums[f] = frame_sums.get(f, 0.0) + float(d[m].sum())
                frame_counts[f] = frame_counts.get(f, 0) + int(m.sum())
    per_frame = {f: frame_sums[f] / frame_counts[f] for f in sorted(frame_sums)}
    return total / count, per_frame


# -- training --------------------------------------------------------------------

def caption_slice(text_ids) -> slice:
    """Tokens after the last newline word of the metadata template."""
    ids = np.asarray(text_ids)
    nl = np.flatnonzero(ids == _NEWLINE_WORD)
    return slice(int(nl[-1]) + 1 if len(nl) else 0, len(ids))


def null_prompt(text_ids) -> np.ndarray:
    """Unconditional prompt: the caption body replaced by ``NULL_PROMPT`` tokens."""
    ids = np.array(text_ids, dtype=np.int64)
    ids[caption_slice(ids)] = NULL_PROMPT
    return ids


@dataclass
class MaskedExample:
    inputs: np.ndarray
    targets: np.ndarray
    loss_positions: np.ndarray
    frame_index: np.ndarray
    layout: SequenceLayout


def mask_example(sequence: MultimodalSequence, rho: float, rng: np.random.Generator,
                 mask_mode: str = "tube", drop_caption: bool = False) -> MaskedExample:
    """Replace content tokens by MASK following a tube (or global random) pattern."""
    layout = sequence.layout
    if mask_mode == "tube":
        keep = np.broadcast_to(sample_tube_mask(layout.grid, rho, rng).keep, (layout.T, *layout.grid))
    elif mask_mode == "random":
        keep = sample_random_mask((layout.T, *layout.grid), rho, rng)
    else:
        raise ArgumentError(f"unknown mask mode {mask_mode!r}")
    inputs = sequence.ids.copy()
    loss = np.zeros(layout.length, dtype=bool)
    for fr in layout.frames:
        idx = fr.content_positions()
        hidden = ~keep[fr.index].ravel()
        inputs[idx[hidden]] = MASK
        loss[idx[hidden]] = True
    if drop_caption:
        inputs[: layout.text_len] = null_prompt(inputs[: layout.text_len])
    return MaskedExample(inputs, sequence.ids, loss, layout.frame_of(), layout)


def _layout_inputs(layout: SequenceLayout, model: ToyDecoder):
    pos = assign_positions(layout, model.config.rope)
    vis = layout.tags() == TAG_VISUAL
    b = block_ids(layout)
    return pos, vis, AttentionMask(b, b)


def batch_loss(model: ToyDecoder, examples: list[MaskedExample], chunk_size: int):
    """Loss over a batch; examples sharing a layout are run as one forward."""
    groups: dict[SequenceLayout, list[MaskedExample]] = {}
    for ex in examples:
        groups.setdefault(ex.layout, []).append(ex)
    logits_all, tgt, sel, frm = [], [], [], []
    for layout, exs in groups.items():
        pos, vis, mask = _layout_inputs(layout, model)
        logits, _ = forward(model, np.stack([e.inputs for e in exs]), pos, vis, mask, commit=False)
        logits_all.append(logits.reshape(-1, logits.shape[-1]))
        tgt.append(np.concatenate([e.targets for e in exs]))
        sel.append(np.concatenate([e.loss_positions for e in exs]))
        frm.append(np.concatenate([e.frame_index for e in exs]))
    return chunked_cross_entropy(torch.cat(logits_all), np.concatenate(tgt), np.concatenate(sel),
                                 chunk_size, np.concatenate(frm))


def make_optimizer(model: ToyDecoder, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay = [p for p in model.parameters() if p.ndim >= 2]
    no_decay = [p for p in model.parameters() if p.ndim < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
    )


def train_step(batch: list[MultimodalSequence], model: ToyDecoder, optimizer: torch.optim.Optimizer,
               cfg: TrainConfig, rng: np.random.Generator, rho: float | None = None,
               mask_mode: str | None = None):
    """One AR-DF update. Returns ``(loss, per_frame_losses)``.

    Each video gets its own ratio ``rho ~ U[rho_tra, 1]`` (or the forced
    ``rho``) and a single mask pattern shared by all its frames.
    """
    mode = mask_mode or cfg.mask_mode
    examples = []
    for seq in batch:
        r = sample_train_ratio(cfg.rho_tra, rng) if rho is None else rho
        drop = bool(rng.random() < cfg.caption_drop)
        examples.append(mask_example(seq, r, rng, mode, drop_caption=drop))
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, per_frame = batch_loss(model, examples, cfg.chunk_size)
    value = loss.detach().item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}; per-frame {per_frame}; "
                           f"ratios {[float(e.loss_positions.mean()) for e in examples]}")
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return value, per_frame


@torch.no_grad()
def evaluate(model: ToyDecoder, videos: list[MultimodalSequence], rho: float, seed: int,
             mask_mode: str = "tube", chunk_size: int = 2000, batch_size: int = 16):
    """Validation loss with fixed-seed masks; returns ``(loss, per_frame_losses)``."""
    rng = numerics.make_rng(seed)
    examples = [mask_example(v, rho, rng, mask_mode) for v in videos]
    model.eval()
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    total = n_total = 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        loss, per_frame = batch_loss(model, chunk, chunk_size)
        n = int(sum(e.loss_positions.sum() for e in chunk))
        total += float(loss) * n
        n_total += n
        for f, v in per_frame.items():
            c = int(sum((e.loss_positions & (e.frame_index == f)).sum() for e in chunk))
            sums[f] = sums.get(f, 0.0) + v * c
            counts[f] = counts.get(f, 0) + c
    return total / n_total, {f: sums[f] / counts[f] for f in sorted(sums)}


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to 10% of the peak rate."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def first_frame_only(seq: MultimodalSequence) -> MultimodalSequence:
    """Image-phase view of a video: the same prompt with only frame 0."""
    from .sequence import sequence_from_ids

    L = seq.layout
    ids = np.concatenate([seq.ids[: L.text_len], [VIDEO_START, DURATION_BASE + 1, seq.ids[L.text_len + 2]],
                          seq.ids[L.frames[0].start:L.frames[0].stop], seq.ids[L.video_end:]])
    return sequence_from_ids(ids)


@dataclass
class FitHistory:
    train: list[tuple[int, float, dict]] = field(default_factory=list)
    validation: list[tuple[int, float, dict]] = field(default_factory=list)


def fit(model: ToyDecoder, train_set: list[MultimodalSequence], cfg: TrainConfig, seed: int,
        val_set: list[MultimodalSequence] | None = None, eval_every: int = 0, val_seed: int = 1234,
        callback=None) -> FitHistory:
    """Train for ``cfg.steps`` steps; ``callback(step, model)`` runs after each step."""
    rng = numerics.make_rng(seed)
    opt = make_optimizer(model, cfg)
    hist = FitHistory()
    images = [first_frame_only(s) for s in train_set] if cfg.image_steps else []
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, cfg)
        pool = images if step < cfg.image_steps else train_set
        idx = rng.integers(0, len(pool), size=cfg.batch_size)
        loss, per_frame = train_step([pool[i] for i in idx], model, opt, cfg, rng)
        hist.train.append((step + 1, loss, per_frame))
        if val_set and eval_every and ((step + 1) % eval_every == 0 or step + 1 == cfg.steps):
            vl, vpf = evaluate(model, val_set, cfg.rho_tra, val_seed, cfg.mask_mode, cfg.chunk_size)
            hist.validation.append((step + 1, vl, vpf))
        if callback is not None:
            callback(step + 1, model)
    return hist


# -- inference -------------------------------------------------------------------

def schedule_alpha(n: int, n_steps: int) -> float:
    """``cos(pi/2 * n/N)``, exactly 0 at the last step and never negative."""
    if n >= n_steps:
        return 0.0
    return max(0.0, math.cos(math.pi / 2 * (n / n_steps)))


def remask_count(n: int, n_steps: int, n_f: int) -> int:
    """Tokens left masked after iteration ``n``: ``floor(cos(pi/2 * n/N) * N_f)``."""
    if not 1 <= n <= n_steps:
        raise ArgumentError(f"iteration {n} outside [1, {n_steps}]")
    return int(math.floor(schedule_alpha(n, n_steps) * n_f))


def cfg_combine(cond_logits, uncond_logits, s: float):
    """``uncond + s * (cond - uncond)``, written so that s=0 and s=1 are exact."""
    return (1.0 - s) * uncond_logits + s * cond_logits


@dataclass
class GenerationContext:
    """Per-session state: layout-wide positions/blocks and one cache per CFG branch."""

    model: ToyDecoder
    layout: SequenceLayout
    positions: np.ndarray
    is_visual: np.ndarray
    blocks: np.ndarray
    cond: KVCache
    uncond: KVCache | None = None

    def slice_forward(self, tokens, start: int, cache: KVCache, commit: bool):
        stop = start + len(tokens)
        mask = AttentionMask(self.blocks[start:stop], np.concatenate([cache.blocks, self.blocks[start:stop]]))
        logits, cache = forward(self.model, tokens, self.positions[start:stop],
                                self.is_visual[start:stop], mask, cache, commit=commit)
        return logits, cache


def _prefix(text_ids, T: int, fps: int) -> np.ndarray:
    return np.concatenate([np.asarray(text_ids, dtype=np.int64),
                           [VIDEO_START, DURATION_BASE + T, FPS_BASE + fps]]).astype(np.int64)


@torch.no_grad()
def start_session(model: ToyDecoder, text_ids, T: int, grid: tuple[int, int], fps: int = 8,
                  use_cfg: bool = True) -> GenerationContext:
    """Encode the prompt causally and cache it (both CFG branches when ``use_cfg``)."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    layout = SequenceLayout(len(text_ids), T, *grid)
    pos = assign_positions(layout, model.config.rope)
    vis = layout.tags() == TAG_VISUAL
    blocks = block_ids(layout)
    model.eval()
    P = layout.prefix_len
    text_mask = build_text_causal_mask(P)
    assert np.array_equal(text_mask.query_blocks, blocks[:P])
    _, cond = forward(model, _prefix(text_ids, T, fps), pos[:P], vis[:P], text_mask)
    uncond = None
    if use_cfg:
        _, uncond = forward(model, _prefix(null_prompt(text_ids), T, fps), pos[:P], vis[:P], text_mask)
    return GenerationContext(model, layout, pos, vis, blocks, cond, uncond)


@torch.no_grad()
def generate_frame(ctx: GenerationContext, t: int, sampler: SamplerConfig, rng: np.random.Generator):
    """Iteratively unmask frame ``t``. Returns ``(grid ids (H, W), [StepRecord])``."""
    layout = ctx.layout
    fr = layout.frames[t]
    H, W = layout.grid
    n_f = layout.n_f
    local = fr.content_positions() - fr.start
    current = np.full(n_f, MASK, dtype=np.int64)
    use_cfg = sampler.cfg_scale > 0 and ctx.uncond is not None
    trace = []
    N = sampler.n_steps
    for n in range(1, N + 1):
        tokens = frame_tokens(current.reshape(H, W))
        logits, _ = ctx.slice_forward(tokens, fr.start, ctx.cond, commit=False)
        logits = logits[local].to(torch.float64)
        if use_cfg:
            u_logits, _ = ctx.slice_forward(tokens, fr.start, ctx.uncond, commit=False)
            logits = cfg_combine(logits, u_logits[local].to(torch.float64), sampler.cfg_scale)
        probs = numerics.softmax_rows((logits / sampler.temperature).numpy())
        sampled = numerics.multinomial_rows(probs, rng) + TEXT_SIZE
        was_masked = current == MASK
        sampled = np.where(was_masked, sampled, current)
        conf = probs[np.arange(n_f), sampled - TEXT_SIZE].astype(np.float64)
        conf[~was_masked] = np.inf
        tau = sampler.gumbel_temperature * (1.0 - n / N)
        noisy = conf + tau * numerics.gumbel_sample(n_f, rng)
        alpha = schedule_alpha(n, N)
        candidates = np.flatnonzero(was_masked)
        U = min(remask_count(n, N, n_f), len(candidates))
        low = candidates[numerics.lowest_k_indices(noisy[candidates], U)]
        sampled[low] = MASK
        current = sampled
        finite = conf[np.isfinite(conf)]
        trace.append(StepRecord(t, n, alpha, U, int((current != MASK).sum()),
                                float(finite.min()) if len(finite) else float("nan"),
                                float(finite.max()) if len(finite) else float("nan")))
        if trace[-1].revealed + U != n_f:
            raise InvariantError("revealed + U != N_f after re-masking")
    if (current == MASK).any():
        raise InvariantError(f"{int((current == MASK).sum())} positions still masked after the last step")
    if not is_visual_id(current).all():
        raise InvariantError("decoded a non-visual id")
    return current.reshape(H, W), trace


@torch.no_grad()
def cache_frame(ctx: GenerationContext, t: int, frame_ids: np.ndarray, keep: np.ndarray) -> None:
    """Append the partially observed frame ``t`` to every branch cache."""
    fr = ctx.layout.frames[t]
    tokens = frame_tokens(np.where(keep, frame_ids, MASK))
    _, ctx.cond = ctx.slice_forward(tokens, fr.start, ctx.cond, commit=True)
    if ctx.uncond is not None:
        _, ctx.uncond = ctx.slice_forward(tokens, fr.start, ctx.uncond, commit=True)


@dataclass
class GeneratedVideo:
    frames: np.ndarray  # (T, H, W)
    trace: list[StepRecord]
    cache_mask: np.ndarray  # (H, W) keep pattern reused for every cached frame
    context: GenerationContext


@torch.no_grad()
def generate_video(model: ToyDecoder, text_ids, T: int, grid: tuple[int, int], sampler: SamplerConfig,
                   rng: np.random.Generator, fps: int = 8) -> GeneratedVideo:
    ctx = start_session(model, text_ids, T, grid, fps, use_cfg=sampler.cfg_scale > 0)
    keep = sample_tube_mask(grid, sampler.rho_inf, rng).keep
    frames = np.empty((T, *grid), dtype=np.int64)
    trace: list[StepRecord] = []
    for t in range(T):
        frames[t], tr = generate_frame(ctx, t, sampler, rng)
        trace += tr
        cache_frame(ctx, t, frames[t], keep)
    return GeneratedVideo(frames, trace, keep, ctx)


__all__ = [
    "SamplerConfig", "TrainConfig", "StepRecord", "chunked_cross_entropy", "train_step", "evaluate",
    "fit", "remask_count", "cfg_combine", "generate_frame", "generate_video", "start_session",
    "cache_frame", "mask_example", "null_prompt", "caption_slice",
]
