import math

import numpy as np
import pytest
import torch

from tokvid import ardf, numerics, synthdata
from tokvid.ardf import (SamplerConfig, TrainConfig, cfg_combine, chunked_cross_entropy, generate_frame,
                         generate_video, make_optimizer, mask_example, null_prompt, remask_count, start_session,
                         train_step)
from tokvid.errors import ArgumentError, EmptyLossError, PartitionError
from tokvid.model import ModelConfig, init_params
from tokvid.rope import RopeConfig
from tokvid.sequence import MASK, NULL_PROMPT, TEXT_SIZE, VISUAL_SIZE, text_vocab_size, tokenize_text

torch.set_num_threads(1)


def toy_model(seed=0, visual_vocab=None, head_dim=16, heads=2, layers=1, dtype=torch.float32):
    cfg = ModelConfig(n_layers=layers, hidden_size=heads * head_dim, n_heads=heads, head_dim=head_dim,
                      ffn_multiplier=2.0, text_vocab=text_vocab_size(),
                      visual_vocab=visual_vocab or synthdata.visual_vocab_needed(),
                      rope=RopeConfig(head_dim=head_dim))
    return init_params(cfg, numerics.make_rng(seed), dtype=dtype)


def small_videos(n=6, grid=(3, 3), T=3, seed=0):
    ds = synthdata.make_dataset(n, synthdata.SpecDistribution(grid=grid, T=T), numerics.make_rng(seed))
    return [v.sequence for v in ds.train + ds.validation]


# -- chunked cross-entropy ------------------------------------------------------

def reference_ce(logits, targets, sel):
    lg = logits[torch.as_tensor(sel)].to(torch.float64)
    tg = torch.as_tensor(targets[sel] - TEXT_SIZE)
    return float(torch.nn.functional.cross_entropy(lg, tg))


@pytest.mark.parametrize("chunk", [1, 7, 2000, 10**6])
def test_chunked_matches_unchunked(chunk):
    rng = numerics.make_rng(0)
    n, V = 53, 40
    logits = torch.from_numpy(rng.standard_normal((n, V)).astype(np.float32) * 3)
    targets = TEXT_SIZE + rng.integers(0, V, n)
    sel = rng.random(n) < 0.6
    loss, _ = chunked_cross_entropy(logits, targets, sel, chunk)
    assert abs(float(loss) - reference_ce(logits, targets, sel)) < 1e-6


def test_uniform_logits_give_log_vocab():
    logits = torch.zeros(5, VISUAL_SIZE)
    targets = TEXT_SIZE + np.array([0, 5, 63_999, 100, 7])
    loss, _ = chunked_cross_entropy(logits, targets, np.ones(5, bool), 2)
    assert abs(float(loss) - math.log(64_000)) < 1e-4
    assert abs(math.log(64_000) - 11.0666) < 1e-4


def test_per_frame_breakdown():
    rng = numerics.make_rng(1)
    logits = torch.from_numpy(rng.standard_normal((10, 6)))
    targets = TEXT_SIZE + rng.integers(0, 6, 10)
    frames = np.array([0] * 5 + [1] * 5)
    sel = np.ones(10, bool)
    loss, per = chunked_cross_entropy(logits, targets, sel, 3, frames)
    sel0 = frames == 0
    assert abs(per[0] - reference_ce(logits, targets, sel0)) < 1e-9
    assert abs(per[1] - reference_ce(logits, targets, ~sel0)) < 1e-9
    assert abs(float(loss) - (per[0] + per[1]) / 2) < 1e-9


def test_chunked_errors():
    logits = torch.zeros(3, 4)
    with pytest.raises(EmptyLossError):
        chunked_cross_entropy(logits, TEXT_SIZE + np.zeros(3, int), np.zeros(3, bool))
    with pytest.raises(PartitionError):
        chunked_cross_entropy(logits, np.array([TEXT_SIZE, 5, TEXT_SIZE]), np.ones(3, bool))
    with pytest.raises(ArgumentError):
        chunked_cross_entropy(logits, TEXT_SIZE + np.zeros(3, int), np.ones(3, bool), 0)


# -- training -------------------------------------------------------------------

def test_mask_example_tube_and_loss_positions():
    seq = small_videos()[0]
    ex = mask_example(seq, 0.5, numerics.make_rng(2), "tube")
    L = seq.layout
    masked = np.stack([ex.inputs[fr.content_positions()] == MASK for fr in L.frames])
    assert all(np.array_equal(masked[0], m) for m in masked)
    assert np.array_equal(ex.loss_positions, ex.inputs == MASK)
    assert np.array_equal(ex.targets, seq.ids)


def test_caption_drop_uses_null_prompt():
    seq = small_videos()[0]
    ex = mask_example(seq, 0.5, numerics.make_rng(2), drop_caption=True)
    text = ex.inputs[: seq.layout.text_len]
    caption = tokenize_text(synthdata.make_video(synthdata.MotionSpec(grid=(3, 3), T=3)).spec.caption())
    assert (text[-len(caption):] == NULL_PROMPT).all()
    assert (text[: -len(caption)] == seq.ids[: seq.layout.text_len - len(caption)]).all()
    assert (null_prompt(seq.text_ids) == text).all()


def test_rho_one_untrained_is_near_uniform():
    model = toy_model(visual_vocab=VISUAL_SIZE)
    opt = make_optimizer(model, TrainConfig())
    loss, _ = train_step(small_videos()[:2], model, opt, TrainConfig(), numerics.make_rng(3), rho=1.0)
    assert abs(loss - math.log(64_000)) / math.log(64_000) < 0.05


def test_rho_zero_is_empty():
    model = toy_model()
    opt = make_optimizer(model, TrainConfig())
    with pytest.raises(EmptyLossError):
        train_step(small_videos()[:2], model, opt, TrainConfig(), numerics.make_rng(3), rho=0.0)


def test_optimizer_hyperparameters():
    model = toy_model()
    opt = make_optimizer(model, TrainConfig())
    assert all(g["betas"] == (0.9, 0.95) for g in opt.param_groups)
    decays = {g["weight_decay"] for g in opt.param_groups}
    assert decays == {0.1, 0.0}
    no_decay = next(g for g in opt.param_groups if g["weight_decay"] == 0.0)
    assert all(p.ndim == 1 for p in no_decay["params"])


def test_config_defaults_and_validation():
    s, t = SamplerConfig(), TrainConfig()
    assert (s.rho_inf, s.n_steps, s.cfg_scale, s.gumbel_temperature) == (0.7, 50, 16.0, 1.0)
    assert (t.rho_tra, t.beta1, t.beta2, t.weight_decay, t.chunk_size) == (0.7, 0.9, 0.95, 0.1, 2000)
    with pytest.raises(ArgumentError):
        SamplerConfig(n_steps=0)
    with pytest.raises(ArgumentError):
        TrainConfig(rho_tra=1.2)
    with pytest.raises(ArgumentError):
        TrainConfig(mask_mode="stripes")


def test_gradient_check():
    """Analytic gradients vs central differences on a model under 5k parameters."""
    cfg = ModelConfig(n_layers=1, hidden_size=16, n_heads=1, head_dim=16, ffn_multiplier=1.0, text_vocab=20,
                      visual_vocab=6, rope=RopeConfig(head_dim=16))
    model = init_params(cfg, numerics.make_rng(4), dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():  # larger weights give gradients well above round-off
            p.mul_(10.0) if p.ndim == 2 else p.add_(torch.from_numpy(numerics.make_rng(5).normal(0, 0.3, p.shape)))
    assert model.num_params() <= 5000
    rng = numerics.make_rng(6)
    from tokvid.sequence import VideoMetadata, encode_sequence

    seq = encode_sequence(VideoMetadata(16, 16, 5, 1), [], TEXT_SIZE + rng.integers(0, 6, (2, 2, 2)))
    ids = seq.ids.copy()
    ids[ids < TEXT_SIZE] %= 20  # fold text and structural ids into the micro vocabulary
    seq = type(seq)(ids, seq.tags, seq.layout)
    ex = mask_example(seq, 0.5, rng)

    def loss_fn():
        return ardf.batch_loss(model, [ex], 7)[0]

    model.zero_grad()
    loss_fn().backward()
    params = list(model.parameters())
    flat = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.numel())]
    picks = rng.choice(len(flat), 50, replace=False)
    eps = 1e-6
    worst = 0.0
    for k in picks:
        pi, idx = flat[k]
        p = params[pi]
        analytic = float(p.grad.view(-1)[idx])
        with torch.no_grad():
            orig = float(p.view(-1)[idx])
            p.view(-1)[idx] = orig + eps
            up = float(loss_fn())
            p.view(-1)[idx] = orig - eps
            down = float(loss_fn())
            p.view(-1)[idx] = orig
        numeric = (up - down) / (2 * eps)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
        worst = max(worst, err)
    assert worst < 1e-3


@pytest.mark.slow
def test_training_loss_decreases():
    ds = synthdata.make_dataset(60, synthdata.SpecDistribution(grid=(4, 4), T=3), numerics.make_rng(7))
    model = toy_model(head_dim=16, heads=2, layers=2)
    hist = ardf.fit(model, [v.sequence for v in ds.train], TrainConfig(steps=200, batch_size=4,
                                                                      learning_rate=3e-3), seed=8)
    losses = np.array([l for _, l, _ in hist.train])
    blocks = losses.reshape(4, 50).mean(axis=1)
    assert np.all(np.diff(blocks) < 0), blocks


# -- inference ------------------------------------------------------------------

def test_remask_count():
    assert remask_count(50, 50, 100) == 0
    assert remask_count(1, 50, 100) == 99
    us = [remask_count(n, 50, 100) for n in range(1, 51)]
    assert all(a >= b for a, b in zip(us, us[1:]))
    with pytest.raises(ArgumentError):
        remask_count(0, 50, 100)
    with pytest.raises(ArgumentError):
        remask_count(51, 50, 100)


def test_cfg_endpoints():
    rng = numerics.make_rng(0)
    c, u = torch.from_numpy(rng.standard_normal(8)), torch.from_numpy(rng.standard_normal(8))
    assert torch.equal(cfg_combine(c, u, 1.0), c)
    assert torch.equal(cfg_combine(c, u, 0.0), u)
    assert torch.allclose(cfg_combine(c, u, 16.0), u + 16 * (c - u))


def prompt_ids():
    return tokenize_text("Generate a video:\na red square moving left")


def test_single_step_reveals_everything():
    model = toy_model()
    ctx = start_session(model, prompt_ids(), 1, (3, 3))
    grid, trace = generate_frame(ctx, 0, SamplerConfig(n_steps=1), numerics.make_rng(0))
    assert len(trace) == 1 and trace[0].U == 0 and trace[0].revealed == 9
    assert (grid >= TEXT_SIZE).all()


def test_zero_gumbel_remasks_least_confident():
    """Two positions, two steps, no noise: the lower-probability pick is re-masked at n=1."""
    model = toy_model(seed=3)
    sampler = SamplerConfig(n_steps=2, gumbel_temperature=0.0, cfg_scale=0.0)
    # N_f=2 grid; U(1) = floor(cos(pi/4)*2) = 1
    ctx = start_session(model, prompt_ids(), 1, (1, 2), use_cfg=False)
    fr = ctx.layout.frames[0]
    from tokvid.sequence import frame_tokens

    tokens = frame_tokens(np.full((1, 2), MASK))
    logits, _ = ctx.slice_forward(tokens, fr.start, ctx.cond, commit=False)
    local = fr.content_positions() - fr.start
    probs = numerics.softmax_rows(logits[local].detach().to(torch.float64).numpy())
    rng = numerics.make_rng(11)
    picks = numerics.multinomial_rows(probs, numerics.make_rng(11))
    conf = probs[[0, 1], picks]
    expected_masked = int(np.argmin(conf))
    _, trace = generate_frame(ctx, 0, sampler, rng)
    assert trace[0].U == 1 and trace[0].revealed == 1
    assert abs(trace[0].min_confidence - conf.min()) < 1e-6
    # replay the first step to see which position stayed masked
    seen = {}
    orig = ctx.slice_forward

    def spy(tokens, start, cache, commit):
        seen.setdefault("calls", []).append(tokens.copy())
        return orig(tokens, start, cache, commit)

    ctx.slice_forward = spy
    generate_frame(ctx, 0, sampler, numerics.make_rng(11))
    second = seen["calls"][1][local]
    assert second[expected_masked] == MASK and second[1 - expected_masked] != MASK


def test_generate_frame_deterministic():
    model = toy_model()
    outs = []
    for _ in range(2):
        ctx = start_session(model, prompt_ids(), 2, (3, 3))
        outs.append(generate_frame(ctx, 0, SamplerConfig(n_steps=4), numerics.make_rng(5))[0])
    assert np.array_equal(*outs)


@pytest.mark.parametrize("case", range(100))
def test_generation_terminates_and_reveals_monotonically(case):
    rng = numerics.make_rng(1000 + case)
    model = _shared_model()
    H, W = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    sampler = SamplerConfig(n_steps=int(rng.integers(1, 12)), cfg_scale=float(rng.choice([0.0, 1.0, 4.0])),
                            gumbel_temperature=float(rng.uniform(0, 3)), rho_inf=float(rng.uniform()))
    ctx = start_session(model, prompt_ids(), 1, (H, W), use_cfg=sampler.cfg_scale > 0)
    grid, trace = generate_frame(ctx, 0, sampler, rng)
    assert (grid != MASK).all() and (grid >= TEXT_SIZE).all()
    revealed = [r.revealed for r in trace]
    assert all(a <= b for a, b in zip(revealed, revealed[1:]))
    assert all(r.revealed + r.U == H * W for r in trace)


_MODEL_CACHE = {}


def _shared_model():
    if "m" not in _MODEL_CACHE:
        _MODEL_CACHE["m"] = toy_model(seed=21)
    return _MODEL_CACHE["m"]


def test_generate_video_bookkeeping_and_mask_reuse(monkeypatch):
    model = toy_model()
    used = []
    orig = ardf.cache_frame

    def spy(ctx, t, frame_ids, keep):
        used.append(keep.copy())
        return orig(ctx, t, frame_ids, keep)

    monkeypatch.setattr(ardf, "cache_frame", spy)
    out = generate_video(model, prompt_ids(), 3, (2, 3), SamplerConfig(n_steps=3, rho_inf=0.5),
                         numerics.make_rng(0))
    assert out.frames.shape == (3, 2, 3)
    assert all(np.array_equal(used[0], k) for k in used)
    L = out.context.layout
    assert out.context.cond.length == L.text_len + 3 + 3 * L.frame_len
    assert out.context.uncond.length == out.context.cond.length


@pytest.mark.parametrize("rho,expected", [(0.0, True), (1.0, False)])
def test_cache_mask_degenerate(rho, expected):
    out = generate_video(toy_model(), prompt_ids(), 2, (2, 2), SamplerConfig(n_steps=2, rho_inf=rho),
                         numerics.make_rng(1))
    assert (out.cache_mask == expected).all()


def test_rho_inf_zero_caches_full_frames():
    """With nothing masked, the cache equals a fresh encode of the generated frames."""
    from tokvid.masking import AttentionMask
    from tokvid.model import forward
    from tokvid.sequence import frame_tokens

    model = toy_model(dtype=torch.float64)
    out = generate_video(model, prompt_ids(), 2, (2, 2), SamplerConfig(n_steps=2, rho_inf=0.0, cfg_scale=0.0),
                         numerics.make_rng(2))
    ctx = out.context
    L = ctx.layout
    ids = np.concatenate([ardf._prefix(prompt_ids(), 2, 8)] + [frame_tokens(f) for f in out.frames])
    n = len(ids)
    _, ref = forward(model, ids, ctx.positions[:n], ctx.is_visual[:n],
                     AttentionMask(ctx.blocks[:n], ctx.blocks[:n]))
    for a, b in zip(ref.keys, ctx.cond.keys):
        assert (a - b).abs().max() < 1e-10
    assert ctx.cond.length == n == L.length - 1


def test_remask_count_final_step_is_zero_for_every_n():
    # pi/2 * n / N rounds past pi/2 for some N (13, 26, ...); the count must still end at 0
    for N in range(1, 201):
        counts = [ardf.remask_count(n, N, 977) for n in range(1, N + 1)]
        assert counts[-1] == 0 and min(counts) >= 0
        assert ardf.schedule_alpha(N, N) == 0.0
