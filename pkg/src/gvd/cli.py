"""Command-line entry point: ``gvd <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import format_config, load_config
from .errors import GVDError

log = logging.getLogger("gvd")


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _read_any(path: Path) -> np.ndarray:
    from .io import read_image, read_pgm

    return read_pgm(path) if path.suffix.lower() == ".pgm" else read_image(path)


def cmd_generate(args) -> int:
    from .synth import generate_dataset

    h, w = args.size
    manifest = generate_dataset(args.count, h, w, args.seed, args.out, clamp=args.clamp)
    print(f"wrote {args.count} samples, manifest {manifest}")
    return 0


def cmd_decompose(args) -> int:
    from .fixed_point import decompose, decompose_probabilistic
    from .io import write_image, write_pgm
    from .predictor import load_params

    cfg = load_config(args.config)
    if args.K is not None:
        cfg = cfg.replace(K=args.K)
    params = None
    if args.mode == "learned":
        if args.params is None:
            raise GVDError("--mode learned requires --params")
        params = load_params(args.params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in args.input:
        path = Path(name)
        f = _read_any(path)
        if params is None:
            c, t, trace = decompose_probabilistic(f, cfg)
        else:
            c, t, trace = decompose(f, params, cfg)
        stem = path.stem
        write_image(out / f"{stem}_cartoon.gvd", c)
        write_image(out / f"{stem}_texture.gvd", t)
        write_pgm(out / f"{stem}_cartoon.pgm", c)
        # texture is signed; shift to mid-grey for viewing
        write_pgm(out / f"{stem}_texture.pgm", t + 0.5)
        (out / f"{stem}_trace.csv").write_text(trace.to_csv())
        print(f"{stem}: residual ||c + t - f|| = {trace.residual:.6g}")
    return 0


def cmd_train(args) -> int:
    from .bilevel import load_dataset, train
    from .predictor import init_params, load_params, save_params

    cfg = load_config(args.config).replace(K=args.train_k)
    data = load_dataset(args.manifest)
    init = load_params(args.init) if args.init else init_params(cfg, seed=args.seed)
    if args.factors is not None:
        init.spectral_factors = tuple(args.factors)
    shape = data.f.shape[-2:] if args.renormalize else None
    params, history = train(data, init, cfg, args.steps, args.lr, renormalize_shape=shape)
    save_params(args.out, params)
    hist = Path(args.history) if args.history else Path(str(args.out) + ".loss.csv")
    lines = ["# gvd-loss v1", "step,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(history)]
    hist.write_text("\n".join(lines) + "\n")
    print(f"loss {history[0]:.6g} -> {history[-1]:.6g} over {args.steps} steps")
    return 0


def cmd_theory(args) -> int:
    from .predictor import load_params
    from .theory import run_suite

    cfg = load_config(args.config)
    f = _read_any(Path(args.input))
    params = load_params(args.params) if args.params else None
    report = run_suite(f, cfg, params, seed=args.seed, lemma_trials=args.trials,
                       perturbation_trials=args.trials)
    sys.stdout.write(report.to_text())
    Path(args.out).write_text(report.to_csv())
    return 0 if report.passed else 1


def cmd_eval(args) -> int:
    from .io import read_image, read_manifest_paths
    from .metrics import format_psnr, psnr, rmse, ssim

    rows = ["# gvd-eval v1",
            "name,cartoon_psnr,cartoon_rmse,cartoon_ssim,texture_psnr,texture_rmse,texture_ssim"]
    pred = Path(args.pred)
    scores = []
    for f_path, c_path, t_path in read_manifest_paths(args.manifest):
        stem = f_path.stem
        c_hat = read_image(pred / f"{stem}_cartoon.gvd")
        t_hat = read_image(pred / f"{stem}_texture.gvd")
        c, t = read_image(c_path), read_image(t_path)
        vals = [psnr(c_hat, c), rmse(c_hat, c), ssim(c_hat, c), psnr(t_hat, t), rmse(t_hat, t), ssim(t_hat, t)]
        scores.append(vals)
        rows.append(",".join([stem, format_psnr(vals[0]), f"{vals[1]:.6g}", f"{vals[2]:.6f}",
                              format_psnr(vals[3]), f"{vals[4]:.6g}", f"{vals[5]:.6f}"]))
    Path(args.out).write_text("\n".join(rows) + "\n")
    if scores:
        finite = [s[0] for s in scores if np.isfinite(s[0])]
        mean = f"{np.mean(finite):.4f} dB" if finite else "exact"
        print(f"{len(scores)} images, mean cartoon PSNR {mean}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gvd", description="Cartoon/texture decomposition toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=_size, required=True, help="HxW, e.g. 64x64")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--clamp", action="store_true", help="clamp observations to [0, 1]")
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("decompose", help="split images into cartoon and texture")
    d.add_argument("--input", nargs="+", required=True, help="raw .gvd or 8-bit .pgm images")
    d.add_argument("--mode", choices=("prob", "learned"), default="prob")
    d.add_argument("--params")
    d.add_argument("--config")
    d.add_argument("--K", type=int, help="override the number of outer iterations")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompose)

    t = sub.add_parser("train", help="fit predictor parameters on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--train-k", type=int, default=2, help="outer iterations unrolled during training")
    t.add_argument("--init", help="starting parameter file (default: seeded random)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--renormalize", action="store_true", help="rescale conv layers to --factors each step")
    t.add_argument("--factors", type=float, nargs=2, metavar=("C1", "C2"))
    t.add_argument("--history", help="loss CSV path (default: OUT.loss.csv)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    th = sub.add_parser("theory-check", help="verify the convergence bounds on an image")
    th.add_argument("--input", required=True)
    th.add_argument("--params")
    th.add_argument("--config")
    th.add_argument("--trials", type=int, default=100)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", required=True)
    th.set_defaults(func=cmd_theory)

    e = sub.add_parser("eval", help="score predictions against manifest labels")
    e.add_argument("--manifest", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    sub.add_parser("show-config", help="print the effective configuration").add_argument("--config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "show-config":
            sys.stdout.write(format_config(load_config(args.config)))
            return 0
        return args.func(args)
    except (GVDError, OSError, ValueError) as exc:
        print(f"gvd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
