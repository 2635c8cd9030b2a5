"""Rotary position embeddings for interleaved text and 3D visual tokens.

Five channel-allocation variants are supported. Every variant is described by
a :class:`FrequencyTable` listing, for each channel pair ``j``, its frequency
``base ** (-2j / d)``, the position axis it reads for visual tokens and the
modalities it is active for. Rotation cost is then identical across variants:
the table only changes which position component each pair multiplies.

Positions are carried as rows ``(g, t, h, w)``: ``g`` is the index in the
global sequence, ``t, h, w`` the (offset, scaled) latent coordinates. Text
and structural tokens have ``t = h = w = g``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DimensionError

AXES = ("global", "t", "h", "w")
AXIS_INDEX = {name: i for i, name in enumerate(AXES)}


class RopeVariant(str, enum.Enum):
    VANILLA_1D = "1d"
    SCHEME1 = "scheme1"
    SCHEME2 = "scheme2"
    MROPE = "mrope"
    MMROPE = "mmrope"


@dataclass(frozen=True)
class RopeConfig:
    variant: RopeVariant = RopeVariant.MMROPE
    head_dim: int = 64
    base: float = 10000.0
    meta_group_channels: int = 16
    ratios: tuple[int, int, int] = (2, 3, 3)
    scales: tuple[int, int, int] = (4, 8, 8)

    def __post_init__(self):
        object.__setattr__(self, "variant", RopeVariant(self.variant))
        object.__setattr__(self, "ratios", tuple(int(r) for r in self.ratios))
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be a positive even number, got {self.head_dim}")
        if self.base <= 0:
            raise ConfigError("base must be positive")
        if len(self.ratios) != 3 or min(self.ratios) < 1:
            raise ConfigError(f"ratios must be three positive counts, got {self.ratios}")
        if len(self.scales) != 3 or min(self.scales) < 1:
            raise ConfigError(f"scales must be three integers >= 1, got {self.scales}")
        if self.variant is RopeVariant.MMROPE:
            mg = self.meta_group_channels
            if mg <= 0 or mg % 2 or self.head_dim % mg:
                raise ConfigError(
                    f"head_dim {self.head_dim} must be divisible by meta_group_channels {mg}"
                )
            if (mg // 2) % sum(self.ratios):
                raise ConfigError(
                    f"{mg // 2} pair slots per group cannot be split in ratio {self.ratios}"
                )
            if self.ratios[1] != self.ratios[2]:
                raise ConfigError("interleaved height/width allocation needs equal h and w ratios")

    @property
    def n_pairs(self) -> int:
        return self.head_dim // 2


@dataclass(frozen=True, eq=False)
class FrequencyTable:
    theta: np.ndarray  # (d/2,) float64
    axis: tuple[str, ...]  # per pair, one of AXES
    active_for: tuple[str, ...]  # per pair, "text" | "visual" | "both"
    variant: RopeVariant = RopeVariant.VANILLA_1D
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.axis)

    @property
    def axis_codes(self) -> np.ndarray:
        return np.array([AXIS_INDEX[a] for a in self.axis], dtype=np.int64)

    def active_mask(self, modality: str) -> np.ndarray:
        return np.array([a in (modality, "both") for a in self.active_for], dtype=bool)

    def axis_summary(self) -> dict[str, tuple[int, float, float]]:
        """Per axis: (pair count, max theta, min theta) over visual-active pairs."""
        out = {}
        vis = self.active_mask("visual")
        for name in AXES:
            sel = np.array([a == name for a in self.axis]) & vis
            if sel.any():
                th = self.theta[sel]
                out[name] = (int(sel.sum()), float(th.max()), float(th.min()))
        return out

    def torch_tables(self, device=None, dtype=torch.float64):
        """Tensors used by :func:`rotary_angles_torch`, memoised per device/dtype."""
        key = (str(device), dtype)
        if key not in self._cache:
            self._cache[key] = (
                torch.tensor(self.theta, dtype=dtype, device=device),
                torch.tensor(self.axis_codes, device=device),
                torch.tensor(self.active_mask("text"), device=device),
                torch.tensor(self.active_mask("visual"), device=device),
            )
        return self._cache[key]


def _vanilla_3d_labels(n_pairs: int, ratios: tuple[int, int, int]) -> list[str]:
    total = sum(ratios)
    if n_pairs % total:
        raise ConfigError(f"{n_pairs} pairs cannot be split in ratio {ratios}")
    unit = n_pairs // total
    return ["t"] * (ratios[0] * unit) + ["h"] * (ratios[1] * unit) + ["w"] * (ratios[2] * unit)


def _meta_group_labels(group_pairs: int, ratios: tuple[int, int, int]) -> list[str]:
    unit = group_pairs // sum(ratios)
    labels = ["t"] * (ratios[0] * unit)
    for _ in range(ratios[1] * unit):
        labels += ["h", "w"]
    return labels


def build_frequency_table(config: RopeConfig) -> FrequencyTable:
    d = config.head_dim
    n = config.n_pairs
    j = np.arange(n, dtype=np.float64)
    theta = config.base ** (-2.0 * j / d)
    v = config.variant
    if v is RopeVariant.VANILLA_1D:
        axis = ["global"] * n
        active = ["both"] * n
    elif v in (RopeVariant.SCHEME1, RopeVariant.SCHEME2):
        if n % 2:
            raise ConfigError(f"head_dim {d} must split into two halves of whole pairs")
        half = n // 2
        axis = ["global"] * half + _vanilla_3d_labels(half, config.ratios)
        first = "text" if v is RopeVariant.SCHEME1 else "both"
        active = [first] * half + ["visual"] * half
    elif v is RopeVariant.MROPE:
        axis = _vanilla_3d_labels(n, config.ratios)
        active = ["both"] * n
    else:
        gp = config.meta_group_channels // 2
        axis = _meta_group_labels(gp, config.ratios) * (n // gp)
        active = ["both"] * n
    return FrequencyTable(theta=theta, axis=tuple(axis), active_for=tuple(active), variant=v)


def visual_offset(layout, config: RopeConfig) -> int:
    """Shared offset added to every latent coordinate before scaling."""
    if config.variant in (RopeVariant.SCHEME1, RopeVariant.SCHEME2):
        return 0
    return layout.first_content_index


def visual_position(latent, offset: int, scales) -> tuple[int, int, int]:
    """Scaled 3D position of one latent coordinate ``(ft, fh, fw)``."""
    return tuple(int(offset + s * c) for s, c in zip(scales, latent))


def assign_positions(layout, config: RopeConfig) -> np.ndarray:
    """Position rows ``(g, t, h, w)`` for every token of ``layout``.

    Text and structural tokens get ``(i, i, i, i)``. A visual token at latent
    coordinate ``(ft, fh, fw)`` gets ``(i, off + s_t*ft, off + s_h*fh, off + s_w*fw)``.
    """
    L = layout.length
    g = np.arange(L, dtype=np.int64)
    pos = np.repeat(g[:, None], 4, axis=1)
    if layout.T == 0:
        return pos
    off = visual_offset(layout, config)
    st, sh, sw = config.scales
    H, W = layout.grid
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    for fr in layout.frames:
        idx = fr.content_positions()
        pos[idx, 1] = off + st * fr.index
        pos[idx, 2] = off + sh * hh.ravel()
        pos[idx, 3] = off + sw * ww.ravel()
    return pos


def _angles_np(position, table: FrequencyTable, modality: str) -> np.ndarray:
    p = np.asarray(position, dtype=np.float64)
    if modality == "text":
        comp = np.full(len(table), p[0])
    elif modality == "visual":
        comp = p[table.axis_codes]
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return comp * table.theta * table.active_mask(modality)


def apply_rotary(vector, position, table: FrequencyTable, modality: str) -> np.ndarray:
    """Rotate one head-dim vector; pair ``j`` occupies channels ``(2j, 2j+1)``."""
    x = np.asarray(vector, dtype=np.float64)
    if x.shape != (2 * len(table),):
        raise DimensionError(f"vector length {x.shape} does not match head_dim {2 * len(table)}")
    ang = _angles_np(position, table, modality)
    c, s = np.cos(ang), np.sin(ang)
    x0, x1 = x[0::2], x[1::2]
    out = np.empty_like(x)
    out[0::2] = x0 * c - x1 * s
    out[1::2] = x0 * s + x1 * c
    return out


def rotary_angles_torch(positions: torch.Tensor, is_visual: torch.Tensor, table: FrequencyTable,
                        dtype=torch.float32) -> torch.Tensor:
    """Angles ``(..., L, d/2)`` for a batch of position rows ``(..., L, 4)``."""
    theta, codes, act_text, act_vis = table.torch_tables(positions.device)
    p = positions.to(torch.float64)
    vis_comp = p[..., codes]  # (..., L, d/2)
    txt_comp = p[..., :1].expand_as(vis_comp)
    vis = is_visual[..., None]
    comp = torch.where(vis, vis_comp, txt_comp)
    active = torch.where(vis, act_vis, act_text)
    return (comp * theta * active).to(dtype)


def rotate_torch(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Apply pairwise rotation to the last dim of ``x`` given per-pair cos/sin."""
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    r0 = x0 * cos - x1 * sin
    r1 = x0 * sin + x1 * cos
    return torch.stack((r0, r1), dim=-1).flatten(-2)


def frequency_table_rows(table: FrequencyTable) -> list[dict]:
    return [
        {"pair_index": j, "theta": float(table.theta[j]), "axis": table.axis[j],
         "active_for": table.active_for[j]}
        for j in range(len(table))
    ]
