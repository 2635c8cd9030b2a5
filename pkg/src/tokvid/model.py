"""Llama-style decoder with QK-Norm, 3D rotary attention and a KV cache.

The output head covers the visual vocabulary only; text tokens are embedded
but never predicted.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, NumericError, PartitionError, SessionError
from .masking import AttentionMask
from .rope import FrequencyTable, RopeConfig, RopeVariant, build_frequency_table, rotary_angles_torch, rotate_torch
from .sequence import TEXT_SIZE, VISUAL_SIZE


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_size: int = 64
    n_heads: int = 4
    head_dim: int = 16
    ffn_multiplier: float = 4.0
    text_vocab: int = TEXT_SIZE
    visual_vocab: int = VISUAL_SIZE
    rope: RopeConfig = field(default_factory=lambda: RopeConfig(head_dim=16))
    rmsnorm_epsilon: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.rope, dict):
            object.__setattr__(self, "rope", RopeConfig(**self.rope))
        if self.hidden_size != self.n_heads * self.head_dim:
            raise ConfigError(
                f"hidden_size {self.hidden_size} != n_heads {self.n_heads} * head_dim {self.head_dim}"
            )
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even")
        if self.rope.head_dim != self.head_dim:
            raise ConfigError(f"rope.head_dim {self.rope.head_dim} != head_dim {self.head_dim}")
        if not 0 < self.text_vocab <= TEXT_SIZE or not 0 < self.visual_vocab <= VISUAL_SIZE:
            raise ConfigError("vocabulary sizes must fit inside the codebook partitions")
        if self.n_layers < 1 or self.ffn_dim < 1:
            raise ConfigError("need at least one layer and a non-empty feed-forward")

    @property
    def ffn_dim(self) -> int:
        return int(round(self.ffn_multiplier * self.hidden_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope"]["variant"] = self.rope.variant.value
        d["rope"]["ratios"] = list(self.rope.ratios)
        d["rope"]["scales"] = list(self.rope.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["rope"] = RopeConfig(**d.get("rope", {}))
        return cls(**d)


# Architecture columns of the reference model-size table.
REFERENCE_SIZES = {
    "0.5B": dict(n_layers=16, hidden_size=1024, n_heads=16, head_dim=64),
    "1B": dict(n_layers=16, hidden_size=2048, n_heads=32, head_dim=64),
    "3B": dict(n_layers=28, hidden_size=3072, n_heads=24, head_dim=128),
}


def reference_config(size: str, **overrides) -> ModelConfig:
    arch = REFERENCE_SIZES[size]
    rope = overrides.pop("rope", RopeConfig(head_dim=arch["head_dim"]))
    return ModelConfig(**arch, ffn_multiplier=overrides.pop("ffn_multiplier", 8 / 3), rope=rope,
                       **overrides)


def rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


def swiglu(x: torch.Tensor, w_gate: torch.Tensor, w_up: torch.Tensor, w_down: torch.Tensor) -> torch.Tensor:
    """``W_down (silu(W_gate x) * W_up x)`` with weights laid out ``(out, in)``."""
    if w_gate.shape != w_up.shape or x.shape[-1] != w_gate.shape[1] or w_down.shape[1] != w_gate.shape[0]:
        raise DimensionError(
            f"inconsistent shapes x{tuple(x.shape)} gate{tuple(w_gate.shape)} "
            f"up{tuple(w_up.shape)} down{tuple(w_down.shape)}"
        )
    return F.linear(F.silu(F.linear(x, w_gate)) * F.linear(x, w_up), w_down)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D, hd = cfg.hidden_size, cfg.head_dim
        self.attn_norm = nn.Parameter(torch.ones(D))
        self.wq = nn.Parameter(torch.empty(D, D))
        self.wk = nn.Parameter(torch.empty(D, D))
        self.wv = nn.Parameter(torch.empty(D, D))
        self.wo = nn.Parameter(torch.empty(D, D))
        self.q_norm = nn.Parameter(torch.ones(hd))
        self.k_norm = nn.Parameter(torch.ones(hd))
        self.ffn_norm = nn.Parameter(torch.ones(D))
        self.w_gate = nn.Parameter(torch.empty(cfg.ffn_dim, D))
        self.w_up = nn.Parameter(torch.empty(cfg.ffn_dim, D))
        self.w_down = nn.Parameter(torch.empty(D, cfg.ffn_dim))


class ToyDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.embed = nn.Parameter(torch.empty(cfg.text_vocab + cfg.visual_vocab, cfg.hidden_size))
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.Parameter(torch.ones(cfg.hidden_size))
        self.head = nn.Parameter(torch.empty(cfg.visual_vocab, cfg.hidden_size))
        self.freq_table: FrequencyTable = build_frequency_table(cfg.rope)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.dtype

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed_index(self, ids: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        vis = ids >= TEXT_SIZE
        idx = torch.where(vis, ids - TEXT_SIZE + cfg.text_vocab, ids)
        bad = (ids < 0) | (~vis & (ids >= cfg.text_vocab)) | (vis & (ids - TEXT_SIZE >= cfg.visual_vocab))
        if bool(bad.any()):
            raise PartitionError(f"token id {int(ids[bad][0])} has no embedding in this model")
        return idx


def _is_norm(name: str) -> bool:
    return name.endswith("norm")


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=torch.float32) -> ToyDecoder:
    """Truncated-normal (2 sigma) weights with std ``config.init_std``; norm gains at 1."""
    model = ToyDecoder(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if _is_norm(name):
                p.fill_(1.0)
            else:
                p.copy_(torch.from_numpy(_truncated_normal(rng, tuple(p.shape), config.init_std)))
    return model.to(dtype)


@dataclass(frozen=True, eq=False)
class KVCache:
    """Per-layer rotated keys and values, plus block ids and positions of cached tokens."""

    keys: tuple[torch.Tensor, ...]  # each (B, n_heads, Lc, head_dim)
    values: tuple[torch.Tensor, ...]
    blocks: np.ndarray  # (Lc,)
    positions: np.ndarray  # (Lc, 4)

    @classmethod
    def empty(cls) -> "KVCache":
        return cls((), (), np.zeros(0, dtype=np.int64), np.zeros((0, 4), dtype=np.int64))

    @property
    def length(self) -> int:
        return len(self.blocks)

    def append(self, keys, values, blocks, positions) -> "KVCache":
        if self.length == 0:
            new_k, new_v = tuple(keys), tuple(values)
        else:
            new_k = tuple(torch.cat([a, b], dim=2) for a, b in zip(self.keys, keys))
            new_v = tuple(torch.cat([a, b], dim=2) for a, b in zip(self.values, values))
        return KVCache(new_k, new_v,
                       np.concatenate([self.blocks, np.asarray(blocks, dtype=np.int64)]),
                       np.concatenate([self.positions, np.asarray(positions, dtype=np.int64)]))


def _dense_mask(attn_mask, n_query: int, cache: KVCache) -> np.ndarray:
    if isinstance(attn_mask, AttentionMask):
        if cache.length and not np.array_equal(attn_mask.key_blocks[: cache.length], cache.blocks):
            raise SessionError("attention mask key blocks disagree with the cached blocks")
        m = attn_mask.dense()
    else:
        m = np.asarray(attn_mask, dtype=bool)
    if m.shape != (n_query, cache.length + n_query):
        raise SessionError(f"attention mask shape {m.shape} != ({n_query}, {cache.length + n_query})")
    return m


def forward(model: ToyDecoder, tokens, positions, is_visual, attn_mask, cache: KVCache | None = None,
            commit: bool = True):
    """Run the decoder over a slice of tokens.

    ``tokens`` is ``(L,)`` or ``(B, L)``; ``positions`` ``(L, 4)`` and
    ``is_visual`` ``(L,)`` are shared across the batch. ``attn_mask`` is an
    :class:`AttentionMask` whose keys are cached tokens followed by the slice,
    or an equivalent dense ``(L, Lc + L)`` boolean array.

    Returns logits ``(B, L, visual_vocab)`` (batch dim dropped for 1-D input)
    and the cache, extended with this slice when ``commit`` is true.
    """
    cfg = model.config
    cache = cache or KVCache.empty()
    tok = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    squeeze = tok.ndim == 1
    if squeeze:
        tok = tok[None]
    B, L = tok.shape
    pos = np.asarray(positions, dtype=np.int64)
    if pos.shape != (L, 4):
        raise DimensionError(f"positions shape {pos.shape} != ({L}, 4)")
    if cache.length:
        if pos[:, 0].min() < cache.length:
            raise SessionError("slice positions overlap tokens already in the cache")
        if cache.keys[0].shape[0] != B:
            raise SessionError(f"cache batch {cache.keys[0].shape[0]} != slice batch {B}")
    mask = torch.from_numpy(_dense_mask(attn_mask, L, cache))
    vis = torch.from_numpy(np.asarray(is_visual, dtype=bool))

    dt = model.dtype
    ang = rotary_angles_torch(torch.from_numpy(pos), vis, model.freq_table, dtype=dt)
    cos, sin = ang.cos(), ang.sin()
    nh, hd, eps = cfg.n_heads, cfg.head_dim, cfg.rmsnorm_epsilon
    scale = 1.0 / math.sqrt(hd)

    x = F.embedding(model.embed_index(tok), model.embed)
    new_keys, new_values = [], []
    for li, layer in enumerate(model.layers):
        h = rmsnorm(x, layer.attn_norm, eps)
        q = F.linear(h, layer.wq).view(B, L, nh, hd).transpose(1, 2)
        k = F.linear(h, layer.wk).view(B, L, nh, hd).transpose(1, 2)
        v = F.linear(h, layer.wv).view(B, L, nh, hd).transpose(1, 2)
        q = rotate_torch(rmsnorm(q, layer.q_norm, eps), cos, sin)
        k = rotate_torch(rmsnorm(k, layer.k_norm, eps), cos, sin)
        new_keys.append(k)
        new_values.append(v)
        if cache.length:
            k = torch.cat([cache.keys[li], k], dim=2)
            v = torch.cat([cache.values[li], v], dim=2)
        scores = (q @ k.transpose(-1, -2)) * scale
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        o = (attn @ v).transpose(1, 2).reshape(B, L, nh * hd)
        x = x + F.linear(o, layer.wo)
        x = x + swiglu(rmsnorm(x, layer.ffn_norm, eps), layer.w_gate, layer.w_up, layer.w_down)
    logits = F.linear(rmsnorm(x, model.final_norm, eps), model.head)
    if not bool(torch.isfinite(logits).all()):
        raise NumericError("non-finite logits in forward pass")
    if commit:
        blocks = (attn_mask.query_blocks if isinstance(attn_mask, AttentionMask)
                  else np.full(L, -1, dtype=np.int64))
        cache = cache.append([k.detach() for k in new_keys], [v.detach() for v in new_values],
                             blocks, pos)
    return (logits[0] if squeeze else logits), cache


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"ARDF"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: ToyDecoder, extra: dict | None = None) -> None:
    """Write ``model`` in the ARDF format (see docs/checkpoint.md)."""
    meta = {"model": model.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    params = list(model.parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            f.write(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())


def load_checkpoint(path, dtype=torch.float32) -> tuple[ToyDecoder, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not an ARDF checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(data[12:12 + n])
    off = 12 + n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    model = ToyDecoder(ModelConfig.from_dict(meta["model"]))
    params = list(model.parameters())
    if count != len(params):
        raise ConfigError(f"{path}: {count} tensors stored, model declares {len(params)}")
    with torch.no_grad():
        for p in params:
            nbytes = 4 * p.numel()
            if off + nbytes > len(data):
                raise ConfigError(f"{path}: truncated tensor data")
            arr = np.frombuffer(data, dtype="<f4", count=p.numel(), offset=off)
            p.copy_(torch.from_numpy(arr.astype(np.float32)).view(p.shape))
            off += nbytes
    if off != len(data):
        raise ConfigError(f"{path}: {len(data) - off} trailing bytes")
    return model.to(dtype), meta.get("extra", {})


def with_rope(config: ModelConfig, **rope_overrides) -> ModelConfig:
    return replace(config, rope=replace(config.rope, **rope_overrides))


__all__ = [
    "ModelConfig", "ToyDecoder", "KVCache", "init_params", "forward", "rmsnorm", "swiglu",
    "save_checkpoint", "load_checkpoint", "reference_config", "with_rope", "RopeVariant",
]
