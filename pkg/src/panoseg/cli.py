"""Command line: ``panoseg {gen,train,propagate,eval,bench}``.

Exit codes: 0 ok, 2 configuration/format error, 3 training divergence,
4 propagation input error, 5 evaluation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .attention import PSCConfig
from .bench import bench, format_table
from .errors import ConfigError, FormatError, PanosegError, PropagationInputError
from .metrics import evaluate_dataset, write_report
from .model import init_params, load_checkpoint, save_checkpoint
from .propagation import ReferenceBankPolicy, TrainHyper, propagate_sequence, train_toy
from .synthdata import generate_dataset, load_video, read_dataset, read_manifest, write_dataset, write_mask

log = logging.getLogger("panoseg")


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise ConfigError(f"size must be positive, got {text!r}")
    return h, w


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def max_jobs(requested: int) -> int:
    cap = os.environ.get("PANOSEG_THREADS")
    jobs = max(1, requested)
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"PANOSEG_THREADS must be an integer, got {cap!r}") from None
    return jobs


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    h, w = parse_size(args.size)
    if h % args.patch or w % args.patch:
        raise ConfigError(f"--size {h}x{w}: height and width must be divisible by the patch size {args.patch}")
    if w % 2:
        raise ConfigError(f"--size {h}x{w}: width must be even")
    seqs = generate_dataset(
        args.videos,
        args.frames,
        h,
        w,
        objects=args.objects,
        seed=args.seed,
        val_videos=args.val,
        noise=args.noise,
        distortion=args.distortion,
    )
    write_dataset(args.out, seqs)
    total = sum(s.meta.frames for s in seqs)
    print(f"wrote {len(seqs)} videos, {total} frames to {args.out}")
    for s in seqs:
        cats = ", ".join(f"{o.id}:{o.category}{'' if o.seen else '*'}" for o in s.meta.objects)
        print(f"  {s.meta.id}  {s.meta.split:<5} T={s.meta.frames} {s.meta.height}x{s.meta.width}  [{cats}]")
    return 0


def _model_config(args) -> PSCConfig:
    if args.no_psc and args.cross_only:
        raise ConfigError("--no-psc and --cross-only are mutually exclusive")
    mode = "none" if args.no_psc else "cross" if args.cross_only else "psc"
    return PSCConfig(
        p=args.p,
        s=args.s,
        h=args.heads,
        channels=args.channels,
        num_blocks=args.blocks,
        patch=args.patch,
        m_max=args.m_max,
        wrap_window=args.wrap_window,
        psc_mode=mode,
        middle="serial" if args.serial else "parallel",
    )


def cmd_train(args) -> int:
    cfg = _model_config(args)
    seqs = read_dataset(args.data)
    train = [s for s in seqs if s.meta.split == "train"] or seqs
    model = init_params(cfg, seed=args.seed)
    hyper = TrainHyper(
        lr=args.lr,
        steps=args.steps,
        seed=args.seed,
        batch=args.batch,
        policy=ReferenceBankPolicy(args.policy, delta=args.delta, first_k=args.first_k),
    )
    result = train_toy(model, train, hyper)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out)
    curve = out.with_suffix(".loss.csv")
    with open(curve, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(result.losses, start=1):
            writer.writerow([i, repr(loss)])
    first = result.losses[0] if result.losses else float("nan")
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {args.steps} steps on {len(train)} videos: loss {first:.4f} -> {last:.4f}; wrote {out} and {curve}")
    return 0


def _propagate_one(model, data: Path, meta, policy, out: Path) -> int:
    try:
        seq = load_video(data, meta, masks="first")
    except FormatError as exc:
        if exc.path is not None and Path(exc.path) == data / meta.mask_file(1):
            raise PropagationInputError(f"video {meta.id}: missing first-frame mask {exc.path}") from exc
        raise

    def on_bank(t, idx):
        log.info("%s: bank [%s] at t=%d", meta.id, ",".join(map(str, idx)), t)

    masks = propagate_sequence(model, list(seq.frames), seq.masks[0], policy, on_bank=on_bank)
    for t in range(2, meta.frames + 1):
        write_mask(out / meta.mask_file(t), masks[t - 1])
    return meta.frames - 1


def cmd_propagate(args) -> int:
    model = load_checkpoint(args.ckpt)
    data, out = Path(args.data), Path(args.out)
    metas = read_manifest(data)
    if args.video:
        known = {m.id: m for m in metas}
        missing = [v for v in args.video if v not in known]
        if missing:
            raise ConfigError(f"unknown video id(s): {', '.join(missing)}")
        metas = [known[v] for v in args.video]
    elif args.split:
        metas = [m for m in metas if m.split == args.split]
    policy = ReferenceBankPolicy(args.policy, delta=args.delta, first_k=args.first_k)
    jobs = max_jobs(args.jobs)
    if jobs == 1:
        written = [_propagate_one(model, data, m, policy, out) for m in metas]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            written = list(pool.map(lambda m: _propagate_one(model, data, m, policy, out), metas))
    print(f"propagated {len(metas)} videos, wrote {sum(written)} masks to {out}")
    return 0


def cmd_eval(args) -> int:
    gt = Path(args.gt)
    metas = read_manifest(args.manifest or gt)
    if args.split:
        metas = [m for m in metas if m.split == args.split]
    report = evaluate_dataset(args.pred, gt, metas, tolerance=args.tolerance, order=args.order)
    sys.stdout.write(report.table())
    if args.report:
        record, table = write_report(report, args.report)
        print(f"wrote {record} and {table}")
    print(f"J&F {100 * report.JF:.1f}")
    return 0


def cmd_bench(args) -> int:
    h, w = parse_size(args.grid)
    rows = bench(h, w, parse_int_list(args.s), channels=args.channels, repeats=args.repeats, seed=args.seed)
    sys.stdout.write(format_table(rows))
    if args.json:
        Path(args.json).write_text(json.dumps([r.as_dict() for r in rows], indent=2) + "\n")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic seam-crossing dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, default=12)
    g.add_argument("--frames", type=int, default=24)
    g.add_argument("--size", default="64x128", help="HxW in pixels")
    g.add_argument("--objects", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val", type=int, default=None, help="number of val videos (default videos // 3)")
    g.add_argument("--noise", type=float, default=3.0)
    g.add_argument("--distortion", type=float, default=0.0)
    g.add_argument("--patch", type=int, default=8)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the toy model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--p", type=int, default=2, help="shift divisor")
    t.add_argument("--s", type=int, default=7, help="window radius in tokens")
    t.add_argument("--heads", type=int, default=8)
    t.add_argument("--channels", type=int, default=32)
    t.add_argument("--blocks", type=int, default=2)
    t.add_argument("--patch", type=int, default=8)
    t.add_argument("--m-max", type=int, default=3)
    t.add_argument("--policy", choices=("base", "long"), default="base")
    t.add_argument("--delta", type=int, default=2)
    t.add_argument("--first-k", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-psc", action="store_true", help="drop the PSC branch")
    t.add_argument("--cross-only", action="store_true", help="replace PSC attention by dense cross-attention")
    t.add_argument("--wrap-window", action="store_true", help="window mask wraps around the width")
    t.add_argument("--serial", action="store_true", help="apply the PSC branch after cross-attention")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("propagate", help="propagate first-frame masks through videos")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video", action="append", help="video id (repeatable; default all)")
    p.add_argument("--split", default=None, help="restrict to one split when --video is absent")
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=("base", "long"), default="base")
    p.add_argument("--delta", type=int, default=5)
    p.add_argument("--first-k", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_propagate)

    e = sub.add_parser("eval", help="score predicted masks")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--manifest", default=None, help="defaults to GT/manifest.json")
    e.add_argument("--split", default=None)
    e.add_argument("--report", default=None, help="write the JSON record here (table alongside as .txt)")
    e.add_argument("--tolerance", type=int, default=None, help="boundary tolerance in pixels")
    e.add_argument("--order", choices=("frames", "objects"), default="frames")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="windowed vs dense attention cost")
    b.add_argument("--grid", default="64x64", help="token grid H'xW'")
    b.add_argument("--s", default="1,3,7", help="comma-separated window radii")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--channels", type=int, default=64)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", default=None)
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except PanosegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
