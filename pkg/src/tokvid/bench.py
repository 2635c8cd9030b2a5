"""Forward-pass latency of RoPE variants at toy sizes.

Every variant runs the same decoder weights; only the frequency table and
the position rows differ. Variants are timed in interleaved rounds (the
order rotates every round) so drift in machine load hits all of them alike.
Latency is process CPU time, which excludes time stolen by other tenants on
shared machines; with a single compute thread it equals the work done.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import torch

from . import numerics
from .masking import build_temporal_causal_mask
from .model import ModelConfig, forward, init_params
from .rope import RopeConfig, assign_positions, build_frequency_table
from .sequence import TAG_VISUAL, TEXT_SIZE, SequenceLayout, text_vocab_size

# Image and video rows of the reference latency table, grids scaled down by 4.
DEFAULT_CASES = {"image": (1, 8, 14), "video": (7, 8, 14)}
DEFAULT_VARIANTS = ("1d", "mrope", "mmrope")


@dataclass
class BenchRow:
    case: str
    variant: str
    median_ms: float
    overhead_vs_1d: float
    overhead_vs_mrope: float
    repetitions: list[float]


def _bench_model(head_dim: int, seed: int):
    cfg = ModelConfig(n_layers=2, hidden_size=4 * head_dim, n_heads=4, head_dim=head_dim, ffn_multiplier=2.0,
                      text_vocab=text_vocab_size(), visual_vocab=256, rope=RopeConfig(head_dim=head_dim))
    return init_params(cfg, numerics.make_rng(seed))


def _inputs(layout: SequenceLayout, rng):
    ids = rng.integers(0, 32, layout.length)
    ids[layout.content_mask()] = TEXT_SIZE + rng.integers(0, 256, layout.T * layout.n_f)
    return ids


def run_bench(variants=DEFAULT_VARIANTS, cases=None, repetitions: int = 3, rounds: int = 30,
              head_dim: int = 64, text_len: int = 32, seed: int = 0) -> list[BenchRow]:
    """Median forward latency per (case, variant) plus overheads relative to 1D and M-RoPE.

    Each repetition runs ``rounds`` interleaved rounds and keeps the per-variant
    median latency; the reported latency is the median over repetitions.
    Overheads are medians of per-round paired ratios pooled over all
    repetitions, which cancels slow drift between rounds.
    """
    cases = cases or DEFAULT_CASES
    model = _bench_model(head_dim, seed)
    model.eval()
    tables = {v: build_frequency_table(RopeConfig(v, head_dim=head_dim)) for v in variants}
    rng = numerics.make_rng(seed)
    rows: list[BenchRow] = []
    for case, (T, H, W) in cases.items():
        layout = SequenceLayout(text_len, T, H, W)
        ids = _inputs(layout, rng)
        vis = layout.tags() == TAG_VISUAL
        mask = build_temporal_causal_mask(layout)
        positions = {v: assign_positions(layout, RopeConfig(v, head_dim=head_dim)) for v in variants}

        def once(v):
            model.freq_table = tables[v]
            t0 = time.process_time()
            forward(model, ids, positions[v], vis, mask, commit=False)
            return time.process_time() - t0

        with torch.no_grad():
            for v in variants:  # warm-up
                once(v)
            per_rep: dict[str, list[float]] = {v: [] for v in variants}
            ratios: dict[tuple[str, str], list[float]] = {}
            for _ in range(repetitions):
                samples: dict[str, list[float]] = {v: [] for v in variants}
                for r in range(rounds):
                    order = variants[r % len(variants):] + variants[: r % len(variants)]
                    for v in order:
                        samples[v].append(once(v))
                for v in variants:
                    per_rep[v].append(statistics.median(samples[v]))
                    for ref in ("1d", "mrope"):
                        if ref in samples:
                            ratios.setdefault((v, ref), []).extend(
                                a / b for a, b in zip(samples[v], samples[ref]))

        def overhead(v, ref):
            return statistics.median(ratios[(v, ref)]) - 1.0 if (v, ref) in ratios else float("nan")

        for v in variants:
            rows.append(BenchRow(case, v, 1e3 * statistics.median(per_rep[v]), overhead(v, "1d"),
                                 overhead(v, "mrope"), [1e3 * x for x in per_rep[v]]))
    return rows


def bench_rows_as_dicts(rows: list[BenchRow]) -> list[dict]:
    return [{"case": r.case, "variant": r.variant, "median_ms": f"{r.median_ms:.4f}",
             "overhead_vs_1d": f"{r.overhead_vs_1d:.5f}", "overhead_vs_mrope": f"{r.overhead_vs_mrope:.5f}"}
            for r in rows]


__all__ = ["BenchRow", "run_bench", "bench_rows_as_dicts", "DEFAULT_CASES", "DEFAULT_VARIANTS"]
