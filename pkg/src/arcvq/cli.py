"""Command-line entry point: ``arcvq <command> [flags]``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import codebook as cbm
from . import pnm
from .data import load_idx, synth_dataset, synth_paths, write_idx
from .errors import ArcVQError
from .gradcheck import SUITES, format_table, run_suites
from .metrics import latent_map_rgb, principal_components
from .quantizer import quantize
from .trainer import (
    VARIANT_SETUP,
    TrainConfig,
    append_csv,
    eval_row,
    evaluate,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
)

log = logging.getLogger("arcvq")


def _threads(value: str | None) -> int:
    raw = value if value is not None else os.environ.get("ARCVQ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ArcVQError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise ArcVQError(f"thread count must be >= 1, got {n}")
    return n


def cmd_train(args) -> int:
    overrides = {"variant": args.variant, "seed": args.seed, "out_dir": args.out, "epochs": args.epochs, "threads": args.threads}
    if args.config:
        if not os.path.exists(args.config):
            raise ArcVQError(f"config file not found: {args.config}")
        cfg = load_config(args.config, **overrides)
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    if not cfg.out_dir:
        cfg = cfg.replace(out_dir=os.path.join("runs", f"{cfg.variant}-seed{cfg.seed}"))
    result = train(cfg)
    r = result.report
    print(f"final: {r.line()}")
    print(
        f"summary variant={cfg.variant} seed={cfg.seed} steps={result.state.step} "
        f"psnr={r.psnr:.4f} ssim={r.ssim:.6f} l1={r.l1:.6f} usage={100 * r.usage_fraction:.2f}% "
        f"perplexity={r.perplexity:.2f} out={cfg.out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    images = load_idx(args.images).images
    r = evaluate(state.model, state.codebook, images, state.cfg.quant_mode)
    print(r.line())
    csv_path = args.csv or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "metrics.csv")
    append_csv(csv_path, [eval_row(state.step, r)])
    return 0


def cmd_analyze(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cb = state.codebook
    if args.images:
        evaluate(state.model, cb, load_idx(args.images).images, state.cfg.quant_mode)
    stats = cbm.compute_stats(cb)
    paths = cbm.export_stats(stats, cb.usage_counts, args.out)
    lines = [
        f"entries: {cb.K} x {cb.d}  step: {state.step}  variant: {state.cfg.variant}",
        f"norm min/max/mean: {stats.norms.min():.6f} / {stats.norms.max():.6f} / {stats.norms.mean():.6f}",
        f"bound M(t): {cb.bound:.6f}" if cb.bound_mode != "unbounded" else "bound M(t): none",
        f"zero-norm rows: {stats.zero_rows}",
        f"usage: {100 * stats.usage_fraction:.2f}%  perplexity: {stats.perplexity:.3f}",
    ]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    for p in paths.values():
        print(f"wrote {p}")
    return 0


def cmd_gradcheck(args) -> int:
    results, elapsed = run_suites(args.suite)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.2f}s")
    return 1 if failed else 0


def cmd_quantize(args) -> int:
    state = load_checkpoint(args.checkpoint)
    images = load_idx(args.images).images[: args.limit]
    model, cb = state.model, state.codebook
    g = model.grid
    comps, _ = principal_components(cb.entries)
    os.makedirs(args.out, exist_ok=True)
    for i, img in enumerate(images):
        qr = quantize(model.encode_array(img[None]), cb, state.cfg.quant_mode)
        with open(os.path.join(args.out, f"tokens-{i:05d}.csv"), "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(qr.indices.reshape(g, g).tolist())
        pnm.write_pgm(os.path.join(args.out, f"recon-{i:05d}.pgm"), model.decode_array(qr.quantized)[0])
        pnm.write_ppm(os.path.join(args.out, f"latent-{i:05d}.ppm"), latent_map_rgb(qr.indices, cb.entries, (g, g), comps))
    print(f"wrote {len(images)} token grids, reconstructions and latent maps to {args.out}")
    return 0


def cmd_reduce(args) -> int:
    state = load_checkpoint(args.checkpoint)
    reduced = cbm.kmeans_reduce(state.codebook, args.k_target, iters=args.iters, seed=args.seed)
    state.codebook = reduced
    state.cfg = state.cfg.replace(K=args.k_target)
    state.adam.m.pop("codebook", None)
    state.adam.v.pop("codebook", None)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(state, args.out)
    print(f"reduced codebook {args.checkpoint} -> {args.k_target} entries: {args.out}")
    return 0


def cmd_synth(args) -> int:
    ds = synth_dataset(args.images, args.side, args.clusters, seed=args.seed, noise=args.noise)
    os.makedirs(args.out, exist_ok=True)
    img_path, lbl_path = synth_paths(args.out, args.name)
    write_idx(img_path, ds, lbl_path)
    print(f"wrote {img_path}")
    print(f"wrote {lbl_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arcvq", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", default=None, help="cap on BLAS threads (default: $ARCVQ_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--variant", choices=list(VARIANT_SETUP))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an IDX image file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--csv", help="metrics CSV to append to (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="codebook norms, distances and usage")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images", help="recount usage over this IDX file first")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--suite", choices=list(SUITES) + ["all"], default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("quantize", help="token grids, reconstructions and latent maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=16, help="number of images to process")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("reduce", help="k-means reduction of a trained codebook")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k-target", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("synth", help="write a synthetic grating dataset as IDX")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=10000)
    p.add_argument("--side", type=int, default=28)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--name", default="synth")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = _threads(args.threads)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            np.seterr(over="ignore", under="ignore")
            return args.func(args)
    except (ArcVQError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
