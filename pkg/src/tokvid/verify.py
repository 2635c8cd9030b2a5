"""Self-contained invariant suites behind ``tokvid verify``.

Each suite raises ``AssertionError`` (or any exception) on failure. They use
small brute-force oracles so they run in well under a minute on a laptop.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import ardf, masking, model, numerics, rope, sequence, synthdata

SUITES: dict[str, callable] = {}


def suite(name):
    def register(fn):
        SUITES[name] = fn
        return fn
    return register


def _close(a, b, tol, what):
    if not abs(a - b) <= tol:
        raise AssertionError(f"{what}: {a} vs {b} (tol {tol})")


# -- numerics ------------------------------------------------------------------

@suite("numerics.matmul")
def _matmul():
    rng = numerics.make_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = [[sum(float(a[i, t]) * float(b[t, j]) for t in range(7)) for j in range(3)] for i in range(5)]
    assert np.allclose(numerics.matmul(a, b), ref, atol=1e-5)


@suite("numerics.softmax")
def _softmax():
    rng = numerics.make_rng(2)
    x = rng.standard_normal((6, 9)) * 20
    p = numerics.softmax_rows(x).astype(np.float64)
    assert np.allclose(p.sum(1), 1, atol=1e-6)
    assert np.allclose(numerics.softmax_rows(x + 123.0), p, atol=1e-6)
    assert np.isfinite(numerics.softmax_rows([[1000.0, 0.0]])).all()


@suite("numerics.multinomial")
def _multinomial():
    rng = numerics.make_rng(3)
    assert all(numerics.multinomial([0, 0, 1], rng) == 2 for _ in range(50))
    draws = numerics.multinomial_rows(np.tile([0.25, 0.75], (20_000, 1)), rng)
    _close(draws.mean(), 0.75, 0.02, "Bernoulli(0.75) frequency")


@suite("numerics.gumbel")
def _gumbel():
    g = numerics.gumbel_sample(50_000, numerics.make_rng(4))
    assert np.isfinite(g).all()
    _close(float(g.mean()), 0.5772156649, 0.03, "Gumbel mean")


@suite("numerics.lowest_k")
def _lowest_k():
    rng = numerics.make_rng(5)
    if numerics.lowest_k_indices([2, 2, 2, 1], 2).tolist() != [3, 0]:
        raise AssertionError("ties must resolve to the lowest index")
    for _ in range(200):
        n = int(rng.integers(1, 20))
        scores = rng.integers(0, 4, n)
        k = int(rng.integers(0, n + 1))
        ref = sorted(range(n), key=lambda i: (scores[i], i))[:k]
        got = numerics.lowest_k_indices(scores, k).tolist()
        if sorted(got) != sorted(ref):
            raise AssertionError(f"lowest_k({scores.tolist()}, {k}) = {got}, expected {ref}")


# -- rope ----------------------------------------------------------------------

@suite("rope.shift_invariance")
def _shift():
    rng = numerics.make_rng(6)
    for v in rope.RopeVariant:
        tab = rope.build_frequency_table(rope.RopeConfig(v, head_dim=64))
        for _ in range(100):
            q, k = rng.standard_normal(64), rng.standard_normal(64)
            p, pp, s = rng.integers(0, 500, 4), rng.integers(0, 500, 4), rng.integers(-200, 200, 4)
            for m, shift in (("visual", s), ("text", np.full(4, s[0]))):
                a = rope.apply_rotary(q, p, tab, m) @ rope.apply_rotary(k, pp, tab, m)
                b = rope.apply_rotary(q, p + shift, tab, m) @ rope.apply_rotary(k, pp + shift, tab, m)
                _close(a, b, 1e-5, f"{v.value} {m} shift invariance")


@suite("rope.allocation")
def _allocation():
    mm = rope.build_frequency_table(rope.RopeConfig("mmrope", head_dim=64))
    assert list(mm.axis) == ["t", "t", "h", "w", "h", "w", "h", "w"] * 4
    m = rope.build_frequency_table(rope.RopeConfig("mrope", head_dim=64))
    assert m.axis == ("t",) * 8 + ("h",) * 12 + ("w",) * 12
    assert mm.theta[0] == 1.0 and m.theta[0] == 1.0


@suite("rope.rotation_oracle")
def _rotation():
    rng = numerics.make_rng(7)
    comp = {"global": 0, "t": 1, "h": 2, "w": 3}
    for v in rope.RopeVariant:
        tab = rope.build_frequency_table(rope.RopeConfig(v, head_dim=32))
        for _ in range(10):
            x, p = rng.standard_normal(32), rng.integers(0, 300, 4)
            for modality in ("text", "visual"):
                R = np.zeros((32, 32))
                act = tab.active_mask(modality)
                for j in range(16):
                    pos = p[0] if modality == "text" else p[comp[tab.axis[j]]]
                    a = pos * 10000.0 ** (-2 * j / 32) * act[j]
                    R[2 * j:2 * j + 2, 2 * j:2 * j + 2] = [[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]
                assert np.allclose(rope.apply_rotary(x, p, tab, modality), R @ x, atol=1e-9)


# -- sequence / masking ----------------------------------------------------------

@suite("sequence.round_trip")
def _round_trip():
    rng = numerics.make_rng(8)
    meta = sequence.VideoMetadata(64, 64, 13, 8)
    for _ in range(40):
        T, H, W = (int(x) for x in rng.integers(1, [5, 9, 9]))
        grid = rng.integers(sequence.TEXT_SIZE, sequence.TOTAL_SIZE, (T, H, W))
        seq = sequence.encode_sequence(meta, [], grid)
        assert sequence.decode_layout(seq) == seq.layout
        assert sequence.validate_sequence(seq) == []
        assert seq.layout.visual_span_len == 4 + T * (3 + H * W + H + 1)


@suite("masking.tube")
def _tube():
    rng = numerics.make_rng(9)
    frames = rng.integers(0, 100, (5, 6, 6))
    kept = []
    for _ in range(300):
        pat = masking.sample_tube_mask((6, 6), 0.7, rng)
        out = masking.apply_tube(frames, pat, -1) == -1
        assert all(np.array_equal(out[0], o) for o in out)
        kept.append(pat.keep.mean())
    sigma = math.sqrt(0.3 * 0.7 / (36 * 300))
    _close(float(np.mean(kept)), 0.3, 3 * sigma, "kept fraction")


@suite("masking.attention_oracle")
def _attention():
    for T in range(4):
        for H, W in ((1, 1), (2, 3), (4, 4)):
            for n in (0, 2, 5):
                L = sequence.SequenceLayout(n, T, H if T else 0, W if T else 0)
                frame = L.frame_of()
                ref = np.zeros((L.length, L.length), bool)
                for q in range(L.length):
                    for k in range(L.length):
                        if q == L.video_end:
                            ref[q, k] = k <= q
                        elif frame[q] < 0:
                            ref[q, k] = k <= q and frame[k] < 0
                        else:
                            ref[q, k] = (frame[k] <= frame[q]) if frame[k] >= 0 else k < L.prefix_len
                assert np.array_equal(masking.build_temporal_causal_mask(L).dense(), ref)


# -- model -----------------------------------------------------------------------

def _micro(variant="mmrope", layers=2, dtype=torch.float64, seed=0):
    cfg = model.ModelConfig(n_layers=layers, hidden_size=32, n_heads=2, head_dim=16, ffn_multiplier=2.0,
                            text_vocab=16, visual_vocab=8,
                            rope=rope.RopeConfig(variant, head_dim=16, scales=(1, 1, 1)))
    return model.init_params(cfg, numerics.make_rng(seed), dtype=dtype)


def _ids(layout, rng):
    ids = rng.integers(0, 16, layout.length)
    ids[layout.content_mask()] = sequence.TEXT_SIZE + rng.integers(0, 8, layout.T * layout.n_f)
    return ids


@suite("model.cache_equivalence")
def _cache():
    rng = numerics.make_rng(10)
    for case in range(6):
        m = _micro(["1d", "mrope", "mmrope"][case % 3], seed=case)
        L = sequence.SequenceLayout(3, int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        ids = _ids(L, rng)
        pos = rope.assign_positions(L, m.config.rope)
        vis = L.tags() == sequence.TAG_VISUAL
        b = masking.block_ids(L)
        full, _ = model.forward(m, ids, pos, vis, masking.AttentionMask(b, b))
        cache = model.KVCache.empty()
        parts = []
        bounds = [0, L.prefix_len] + [f.stop for f in L.frames] + [L.length]
        for s, e in zip(bounds[:-1], bounds[1:]):
            out, cache = model.forward(m, ids[s:e], pos[s:e], vis[s:e], masking.AttentionMask(b[s:e], b[:e]), cache)
            parts.append(out)
        assert float((full - torch.cat(parts)).detach().abs().max()) < 1e-5


@suite("model.causality")
def _causality():
    rng = numerics.make_rng(11)
    m = _micro()
    L = sequence.SequenceLayout(2, 3, 2, 2)
    ids = _ids(L, rng)
    pos = rope.assign_positions(L, m.config.rope)
    vis = L.tags() == sequence.TAG_VISUAL
    mask = masking.build_temporal_causal_mask(L)
    base, _ = model.forward(m, ids, pos, vis, mask)
    for fr in L.frames:
        alt = ids.copy()
        cp = fr.content_positions()
        alt[cp] = sequence.TEXT_SIZE + (alt[cp] - sequence.TEXT_SIZE + 1) % 8
        out, _ = model.forward(m, alt, pos, vis, mask)
        assert float((out[: fr.start] - base[: fr.start]).detach().abs().max()) <= 1e-6


@suite("model.gradient_check")
def _gradcheck():
    m = _micro(layers=1, seed=3)
    with torch.no_grad():
        for p in m.parameters():
            if p.ndim == 2:
                p.mul_(10.0)
    rng = numerics.make_rng(12)
    L = sequence.SequenceLayout(2, 2, 2, 2)
    ids = _ids(L, rng)
    sel = L.content_mask() & (rng.random(L.length) < 0.5)
    sel[L.frames[0].content_start] = True
    inputs = np.where(sel, sequence.MASK, ids)
    pos = rope.assign_positions(L, m.config.rope)
    vis = L.tags() == sequence.TAG_VISUAL
    mask = masking.build_temporal_causal_mask(L)

    def loss():
        logits, _ = model.forward(m, inputs, pos, vis, mask, commit=False)
        return ardf.chunked_cross_entropy(logits, ids, sel, 5)[0]

    m.zero_grad()
    loss().backward()
    params = list(m.parameters())
    for _ in range(20):
        p = params[int(rng.integers(len(params)))]
        i = int(rng.integers(p.numel()))
        g = float(p.grad.view(-1)[i])
        with torch.no_grad():
            o = float(p.view(-1)[i])
            p.view(-1)[i] = o + 1e-6
            up = float(loss())
            p.view(-1)[i] = o - 1e-6
            down = float(loss())
            p.view(-1)[i] = o
        num = (up - down) / 2e-6
        assert abs(g - num) <= 1e-3 * max(abs(g), abs(num), 1e-7), (g, num)


@suite("model.checkpoint")
def _checkpoint():
    m = _micro(dtype=torch.float32)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ardf"
        model.save_checkpoint(path, m)
        back, _ = model.load_checkpoint(path)
    assert all(torch.equal(a, b) for a, b in zip(m.parameters(), back.parameters()))


# -- ardf ------------------------------------------------------------------------

@suite("ardf.chunked_ce")
def _chunked():
    rng = numerics.make_rng(13)
    logits = torch.from_numpy(rng.standard_normal((40, 11)))
    tgt = sequence.TEXT_SIZE + rng.integers(0, 11, 40)
    sel = rng.random(40) < 0.5
    ref = float(torch.nn.functional.cross_entropy(logits[torch.from_numpy(sel)],
                                                  torch.from_numpy(tgt[sel] - sequence.TEXT_SIZE)))
    for c in (1, 7, 2000, 10**6):
        _close(float(ardf.chunked_cross_entropy(logits, tgt, sel, c)[0]), ref, 1e-6, f"chunk {c}")
    u = ardf.chunked_cross_entropy(torch.zeros(3, 64_000), sequence.TEXT_SIZE + np.arange(3), np.ones(3, bool))[0]
    _close(float(u), math.log(64_000), 1e-4, "uniform loss")


@suite("ardf.schedule")
def _schedule():
    assert ardf.remask_count(1, 50, 100) == 99 and ardf.remask_count(50, 50, 100) == 0
    for N in range(1, 120):
        us = [ardf.remask_count(n, N, 100) for n in range(1, N + 1)]
        assert us[-1] == 0 and all(a >= b for a, b in zip(us, us[1:])), N
    c, u = torch.randn(5, dtype=torch.float64), torch.randn(5, dtype=torch.float64)
    assert torch.equal(ardf.cfg_combine(c, u, 1.0), c) and torch.equal(ardf.cfg_combine(c, u, 0.0), u)


@suite("ardf.generation")
def _generation():
    cfg = model.ModelConfig(n_layers=1, hidden_size=32, n_heads=2, head_dim=16, ffn_multiplier=2.0,
                            text_vocab=sequence.text_vocab_size(), visual_vocab=synthdata.visual_vocab_needed(),
                            rope=rope.RopeConfig(head_dim=16))
    m = model.init_params(cfg, numerics.make_rng(14))
    rng = numerics.make_rng(15)
    prompt = sequence.tokenize_text("a red square moving up")
    for _ in range(10):
        sampler = ardf.SamplerConfig(n_steps=int(rng.integers(1, 8)), cfg_scale=float(rng.choice([0.0, 3.0])),
                                     rho_inf=float(rng.uniform()))
        grid = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        out = ardf.generate_video(m, prompt, 2, grid, sampler, rng)
        assert (out.frames != sequence.MASK).all()
        for r in out.trace:
            assert r.revealed + r.U == grid[0] * grid[1]
        L = out.context.layout
        assert out.context.cond.length == L.prefix_len + 2 * L.frame_len


# -- synthdata -------------------------------------------------------------------

@suite("synthdata.validity")
def _synth():
    dist = synthdata.SpecDistribution(grid=(5, 5), T=4)
    a = synthdata.make_dataset(12, dist, numerics.make_rng(16))
    b = synthdata.make_dataset(12, dist, numerics.make_rng(16))
    assert [v.digest() for v in a.train] == [v.digest() for v in b.train]
    for v in a.train + a.validation:
        assert sequence.validate_sequence(v.sequence) == []
    assert not {v.digest() for v in a.train} & {v.digest() for v in a.validation}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    seconds: float
    message: str = ""


def run_suites(names=None) -> list[SuiteResult]:
    results = []
    for name, fn in SUITES.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            fn()
            results.append(SuiteResult(name, True, time.perf_counter() - t0))
        except Exception as exc:  # a failing suite must not stop the others
            msg = f"{type(exc).__name__}: {exc}".strip()
            results.append(SuiteResult(name, False, time.perf_counter() - t0, msg))
    return results


def format_table(results: list[SuiteResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'suite':<{width}}  result  seconds"]
    for r in results:
        line = f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}"
        if r.message:
            line += f"  {r.message[:120]}"
        lines.append(line)
    return "\n".join(lines)


__all__ = ["SUITES", "SuiteResult", "run_suites", "format_table"]
