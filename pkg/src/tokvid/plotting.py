"""Figures written next to the CLI's CSV outputs (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .rope import AXES, FrequencyTable  # noqa: E402

_AXIS_COLORS = {"global": "0.5", "t": "tab:red", "h": "tab:blue", "w": "tab:green"}
# fixed metadata keeps the PNG bytes identical across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_frame_losses(rows: list[tuple[int, int, float]], path, title: str = "Per-frame training loss") -> Path:
    """Loss against step, one line per latent frame; ``rows`` are (step, frame, loss)."""
    arr = np.array(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    cmap = plt.get_cmap("viridis")
    frames = sorted({int(f) for f in arr[:, 1]})
    for i, f in enumerate(frames):
        sel = arr[:, 1] == f
        ax.plot(arr[sel, 0], arr[sel, 2], color=cmap(i / max(1, len(frames) - 1)), lw=1, label=f"frame {f}")
    ax.set_xlabel("step")
    ax.set_ylabel("masked-token loss")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def plot_frequency_table(table: FrequencyTable, path) -> Path:
    """Rotation frequency per channel pair, coloured by the axis it encodes."""
    fig, ax = plt.subplots(figsize=(7, 3))
    j = np.arange(len(table))
    for name in AXES:
        sel = np.array([a == name for a in table.axis])
        if sel.any():
            ax.bar(j[sel], table.theta[sel], color=_AXIS_COLORS[name], label=name)
    ax.set_yscale("log")
    ax.set_xlabel("pair index")
    ax.set_ylabel("theta")
    ax.set_title(f"{table.variant.value} frequency allocation")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_bench(rows: list[dict], path) -> Path:
    cases = sorted({r["case"] for r in rows})
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / len(variants)
    for i, v in enumerate(variants):
        vals = [next(float(r["median_ms"]) for r in rows if r["case"] == c and r["variant"] == v) for c in cases]
        ax.bar(np.arange(len(cases)) + i * width, vals, width, label=v)
    ax.set_xticks(np.arange(len(cases)) + 0.4 - width / 2)
    ax.set_xticklabels(cases)
    ax.set_ylabel("forward CPU time (ms)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_frames(frames: np.ndarray, path, title: str = "") -> Path:
    """Token-id grids of each frame side by side."""
    T = len(frames)
    fig, axes = plt.subplots(1, T, figsize=(1.6 * T, 1.9), squeeze=False)
    lo, hi = int(frames.min()), int(frames.max())
    for t, ax in enumerate(axes[0]):
        ax.imshow(frames[t], cmap="tab20", vmin=lo, vmax=max(hi, lo + 1), interpolation="nearest")
        ax.set_title(f"t={t}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(rows: list[dict], path) -> Path:
    """Still-masked count U per decoding iteration, one line per frame."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    frames = sorted({r["frame"] for r in rows})
    for f in frames:
        sel = [r for r in rows if r["frame"] == f]
        ax.plot([r["n"] for r in sel], [r["U"] for r in sel], lw=1, label=f"frame {f}")
    ax.set_xlabel("iteration n")
    ax.set_ylabel("masked tokens U")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


__all__ = ["plot_frame_losses", "plot_frequency_table", "plot_bench", "plot_frames", "plot_trace"]
