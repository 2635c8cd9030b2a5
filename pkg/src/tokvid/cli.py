"""``tokvid`` command line: train, generate, inspect-rope, verify, bench.

Exit codes: 0 success, 1 user error (bad config, flags or files), 2 internal
invariant or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import torch

from . import ardf, numerics, plotting
from .bench import DEFAULT_VARIANTS, bench_rows_as_dicts, run_bench
from .config import load_config, with_overrides
from .errors import ConfigError, InvariantError, NumericError, TokvidError
from .model import init_params, load_checkpoint, save_checkpoint
from .rope import RopeConfig, RopeVariant, build_frequency_table, frequency_table_rows
from .sequence import VideoMetadata, encode_sequence, metadata_text, tokenize_text, write_sequence_file
from .synthdata import make_dataset

TRACE_COLUMNS = ["frame", "n", "alpha", "U", "revealed"]
ROPE_COLUMNS = ["pair_index", "theta", "axis", "active_for"]
BENCH_COLUMNS = ["case", "variant", "median_ms", "overhead_vs_1d", "overhead_vs_mrope"]


LOSS_COLUMNS = ["step", "frame_index", "mean_loss"]


def loss_columns(T: int) -> list[str]:
    """Header of the wide per-frame table: overall loss then one column per frame."""
    return ["step", "mean_loss"] + [f"frame_{t}" for t in range(T)]


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def _fmt(x: float) -> str:
    return f"{x:.6f}" if math.isfinite(x) else "nan"


def _long_loss_rows(records) -> list[dict]:
    return [{"step": step, "frame_index": t, "mean_loss": _fmt(v)}
            for step, _, per_frame in records for t, v in sorted(per_frame.items())]


def _loss_rows(records, T: int) -> list[dict]:
    rows = []
    for step, loss, per_frame in records:
        row = {"step": step, "mean_loss": _fmt(loss)}
        for t in range(T):
            row[f"frame_{t}"] = _fmt(per_frame.get(t, float("nan")))
        rows.append(row)
    return rows


# -- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = with_overrides(load_config(args.config), mask_mode=args.mask_mode, rope=args.rope,
                         meta_group_channels=args.meta_group_channels, scales=args.scales,
                         steps=args.steps, seed=args.seed, output_dir=args.out)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config()
    data = make_dataset(cfg.data.count, cfg.data.distribution(), numerics.make_rng(cfg.data.seed))
    model = init_params(mcfg, numerics.make_rng(cfg.model.init_seed))
    n_params = sum(p.numel() for p in model.parameters())
    manifest = {"config": cfg.to_dict(), "parameters": n_params, "train_videos": len(data.train),
                "validation_videos": len(data.validation)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    # checkpoints omit output_dir so their bytes do not depend on where they were written
    extra = {"run": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}}

    def checkpoint(step, m):
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"step_{step:06d}.ardf", m, {**extra, "step": step})

    hist = ardf.fit(model, [v.sequence for v in data.train], cfg.train, cfg.seed,
                    val_set=[v.sequence for v in data.validation], eval_every=cfg.eval_every,
                    callback=checkpoint)
    save_checkpoint(out / "model.ardf", model, {**extra, "step": cfg.train.steps})
    T = cfg.data.T
    _write_csv(out / "loss.csv", LOSS_COLUMNS, _long_loss_rows(hist.train))
    _write_csv(out / "frame_loss.csv", loss_columns(T), _loss_rows(hist.train, T))
    _write_csv(out / "val_loss.csv", loss_columns(T), _loss_rows(hist.validation, T))
    plotting.plot_frame_losses([(s, t, v) for s, _, pf in hist.train for t, v in sorted(pf.items())],
                               out / "loss.png", f"{cfg.rope.variant.value}, {cfg.train.mask_mode} masks")
    final = hist.validation[-1][1] if hist.validation else hist.train[-1][1]
    print(f"trained {n_params} parameters for {cfg.train.steps} steps; final loss {final:.4f}; outputs in {out}")
    return 0


# -- generate ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    run = extra.get("run", {})
    if args.config is not None:
        expected = load_config(args.config).model_config()
        if expected != model.config:
            raise ConfigError(f"checkpoint {args.checkpoint} does not match model settings in {args.config}")
    data = run.get("data", {})
    grid = tuple(args.grid or data.get("grid", (8, 8)))
    if len(grid) != 2 or min(grid) < 1:
        raise ConfigError(f"--grid needs two positive integers, got {grid}")
    T = args.frames if args.frames is not None else data.get("T", 7)
    fps = args.fps if args.fps is not None else data.get("fps", 8)
    if T < 1:
        raise ConfigError("--frames must be >= 1")
    sampler = ardf.SamplerConfig(rho_inf=args.rho_inf, n_steps=args.steps, cfg_scale=args.cfg, seed=args.seed)
    meta = VideoMetadata(height_px=8 * grid[0], width_px=8 * grid[1], frames=4 * (T - 1) + 1, fps=fps)
    caption = tokenize_text(args.prompt)
    text_ids = metadata_text(meta) + caption
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    video = ardf.generate_video(model, text_ids, T, grid, sampler, numerics.make_rng(args.seed), fps=fps)
    write_sequence_file(out / "generated.seq", encode_sequence(meta, caption, video.frames))
    rows = [{"frame": r.frame, "n": r.n, "alpha": _fmt(r.alpha), "U": r.U, "revealed": r.revealed}
            for r in video.trace]
    _write_csv(out / "trace.csv", TRACE_COLUMNS, rows)
    plotting.plot_frames(video.frames, out / "frames.png", args.prompt)
    plotting.plot_trace(rows, out / "trace.png")
    print(f"generated {T} frames of {grid[0]}x{grid[1]} tokens into {out}")
    return 0


# -- inspect-rope ------------------------------------------------------------------

def cmd_inspect_rope(args) -> int:
    kw = {"variant": args.rope, "head_dim": args.head_dim}
    if args.meta_group_channels is not None:
        kw["meta_group_channels"] = args.meta_group_channels
    if args.scales is not None:
        kw["scales"] = args.scales
    try:
        table = build_frequency_table(RopeConfig(**kw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = frequency_table_rows(table)
    _write_csv(out, ROPE_COLUMNS, [{**r, "theta": repr(r["theta"])} for r in rows])
    plotting.plot_frequency_table(table, out.with_suffix(".png"))
    print(f"{table.variant.value}: {len(rows)} pairs written to {out}")
    print(f"{'axis':<7} {'pairs':>5} {'theta_min':>12} {'theta_max':>12}")
    for axis in dict.fromkeys(table.axis):
        th = [r["theta"] for r in rows if r["axis"] == axis]
        print(f"{axis:<7} {len(th):>5} {min(th):>12.4e} {max(th):>12.4e}")
    return 0


# -- verify / bench ----------------------------------------------------------------

def cmd_verify(args) -> int:
    from .verify import SUITES, format_table, run_suites

    unknown = sorted(set(args.suite or []) - set(SUITES))
    if unknown:
        raise ConfigError(f"unknown suite(s): {', '.join(unknown)}")
    results = run_suites(args.suite)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 2 if failed else 0


def cmd_bench(args) -> int:
    variants = tuple(args.variants)
    rows = run_bench(variants, repetitions=args.repetitions, rounds=args.rounds, head_dim=args.head_dim,
                     seed=args.seed)
    dicts = bench_rows_as_dicts(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, BENCH_COLUMNS, dicts)
    plotting.plot_bench(dicts, out.with_suffix(".png"))
    print(f"{'case':<6} {'variant':<7} {'median_ms':>10} {'vs_1d':>8} {'vs_mrope':>9}")
    for r in rows:
        print(f"{r.case:<6} {r.variant:<7} {r.median_ms:>10.3f} {r.overhead_vs_1d:>+8.2%} "
              f"{r.overhead_vs_mrope:>+9.2%}")
    if {"1d", "mrope", "mmrope"} <= set(variants):
        mm = [r for r in rows if r.variant == "mmrope"]
        ok = all(r.overhead_vs_1d <= 0.10 and abs(r.overhead_vs_mrope) <= 0.02 for r in mm)
        print("overhead bound (<=10% vs 1d, within 2% of mrope):", "PASS" if ok else "FAIL")
        if not ok and args.strict:
            return 2
    return 0


# -- entry point -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are user errors (exit 1); argparse would use 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tokvid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    variants = [v.value for v in RopeVariant]
    sampler = ardf.SamplerConfig()

    t = sub.add_parser("train", help="train a toy decoder on synthetic token videos")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    t.add_argument("--mask-mode", choices=list(ardf.MASK_MODES))
    t.add_argument("--rope", choices=variants)
    t.add_argument("--meta-group-channels", type=int, choices=[16, 32, 64])
    t.add_argument("--scales", type=_int_list, help="t,h,w position scales, e.g. 4,8,8")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample a token video from a checkpoint")
    g.add_argument("--checkpoint", required=True, type=Path)
    g.add_argument("--prompt", required=True)
    g.add_argument("--frames", type=int, help="latent frames T (default: training T)")
    g.add_argument("--grid", type=_int_list, help="H,W latent grid (default: training grid)")
    g.add_argument("--fps", type=int)
    g.add_argument("--rho-inf", type=float, default=sampler.rho_inf)
    g.add_argument("--steps", type=int, default=sampler.n_steps)
    g.add_argument("--cfg", type=float, default=sampler.cfg_scale)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", type=Path, help="check the checkpoint against this run config")
    g.add_argument("--out", type=Path, default=Path("generated"))
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("inspect-rope", help="dump a RoPE frequency allocation table")
    r.add_argument("--rope", choices=variants, default="mmrope")
    r.add_argument("--head-dim", type=int, default=64)
    r.add_argument("--meta-group-channels", type=int)
    r.add_argument("--scales", type=_int_list)
    r.add_argument("--out", type=Path, default=Path("rope.csv"))
    r.set_defaults(func=cmd_inspect_rope)

    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="forward latency of RoPE variants")
    b.add_argument("--variants", nargs="+", choices=variants, default=list(DEFAULT_VARIANTS))
    b.add_argument("--repetitions", type=int, default=3)
    b.add_argument("--rounds", type=int, default=30)
    b.add_argument("--head-dim", type=int, default=64)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--strict", action="store_true", help="exit 2 when the overhead bound fails")
    b.add_argument("--out", type=Path, default=Path("bench.csv"))
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    torch.use_deterministic_algorithms(True)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvariantError, NumericError) as exc:
        print(f"tokvid: internal failure: {exc}", file=sys.stderr)
        return 2
    except (TokvidError, ValueError, OSError) as exc:
        print(f"tokvid: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
