"""Command-line interface: ``pcreg gen|train|eval|register|bench``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data
from .config import CONFIG_ENV, RunConfig, load_run_config
from .errors import PcregError
from .geometry import check_rotation
from .matching import dump_matching
from .pipeline import (
    ALGORITHMS,
    ModelBundle,
    evaluate,
    load_model,
    register,
    save_model,
    train,
)

log = logging.getLogger("pcreg")
DEFAULTS = RunConfig()
EVAL_HEADER = ["algorithm", "iterations", "rmse_rot_deg", "mae_rot_deg", "rmse_trans", "mae_trans", "n_pairs"]


def _setting(parser, flag: str, section: str, key: str, help: str, **kw):
    """Flag overriding ``[section] key``; the help shows the built-in default."""
    default = getattr(getattr(DEFAULTS, section), key)
    if isinstance(default, tuple):
        default = " ".join(map(str, default))
    # SUPPRESS keeps unset flags out of the namespace, so file values survive
    if "choices" not in kw:
        kw["metavar"] = key.upper()
    parser.add_argument(
        flag, dest=f"{section}__{key}", default=argparse.SUPPRESS, help=f"{help} (default: {default})", **kw
    )


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    grouped: dict[str, dict] = {}
    for name, value in vars(args).items():
        if "__" in name and value is not None:
            section, key = name.split("__", 1)
            if isinstance(value, list):
                value = tuple(value)
            grouped.setdefault(section, {})[key] = value
    for section, values in grouped.items():
        cfg = cfg.override(section, **values)
    return cfg


def _data_flags(p):
    _setting(p, "--pairs", "data", "pairs", "number of pairs", type=int)
    _setting(p, "--seed", "data", "seed", "dataset seed", type=int)
    _setting(p, "--n-points", "data", "n_points", "points sampled per shape", type=int)
    _setting(p, "--keep-points", "data", "keep_points", "points kept per partial view", type=int)
    _setting(p, "--rot-max-deg", "data", "rot_max_deg", "max rotation per axis in degrees", type=float)
    _setting(p, "--trans-max", "data", "trans_max", "max translation per axis", type=float)
    _setting(p, "--noise-sigma", "data", "noise_sigma", "Gaussian noise std", type=float)
    _setting(p, "--noise-clip", "data", "noise_clip", "noise clip magnitude", type=float)
    _setting(p, "--shapes", "data", "shapes", "shape kinds, cycled over pairs", nargs="+",
             choices=data.SHAPE_KINDS)


def _model_flags(p):
    _setting(p, "--keypoints", "model", "keypoints", "keypoints K", type=int)
    _setting(p, "--k-neighbors", "model", "k_neighbors", "graph neighbours k", type=int)
    _setting(p, "--n-iter", "model", "n_iterations", "registration iterations n", type=int)
    _setting(p, "--threshold", "model", "threshold", "ground-truth match distance", type=float)
    _setting(p, "--fusion", "model", "fusion", "matrix fusion mode", choices=("pre_softmax", "post_softmax"))
    _setting(p, "--keypoint-target", "model", "keypoint_target", "keypoint loss target",
             choices=("literal", "normalized"))


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except unset ones and ones the help text already names."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is None or "(default:" in text:
            return text
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcreg",
        description="Partial-to-partial rigid point-cloud registration.",
        formatter_class=_HelpFormatter,
    )
    parser.add_argument(
        "--config", default=None, help=f"config file (default: ${CONFIG_ENV} if set, else built-ins)"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = _HelpFormatter

    p = sub.add_parser("gen", help="generate a synthetic pair dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    _data_flags(p)

    p = sub.add_parser("train", help="train a model on a dataset", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="directory for checkpoints and losses.csv")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _setting(p, "--epochs", "train", "epochs", "training epochs", type=int)
    _setting(p, "--train-seed", "train", "seed", "seed for init and sampling", type=int)
    _setting(p, "--lr", "optim", "lr", "Adam learning rate", type=float)
    _setting(p, "--weight-decay", "optim", "weight_decay", "L2 weight decay", type=float)
    _setting(p, "--accumulate", "train", "accumulate", "gradient accumulation steps", type=int)
    _model_flags(p)

    p = sub.add_parser("eval", help="evaluate an algorithm on a dataset", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="dataset directory or manifest")
    p.add_argument("--checkpoint", default=None, help="model checkpoint (needed for mfgnet)")
    _setting(p, "--algorithm", "eval", "algorithm", "algorithm", choices=ALGORITHMS)
    p.add_argument("--iters", type=int, nargs="+", default=None,
                   help="iteration counts to sweep (default: the model's n)")
    p.add_argument("--out", default=None, help="CSV file for the metrics table")
    p.add_argument("--dump-matching", default=None, help="directory for per-iteration matrix dumps")
    _setting(p, "--workers", "eval", "workers", "parallel worker processes", type=int)
    _setting(p, "--icp-max-iter", "eval", "icp_max_iter", "ICP iteration cap", type=int)
    _setting(p, "--icp-tol", "eval", "icp_tol", "ICP convergence tolerance", type=float)

    p = sub.add_parser("register", help="register one source cloud onto a target", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("source", help="source cloud (.xyz, .txt or ASCII .ply)")
    p.add_argument("target", help="target cloud (.xyz, .txt or ASCII .ply)")
    p.add_argument("--out", default=None, help="transform file (default: standard output)")
    p.add_argument("--iters", type=int, default=None, help="iterations (default: the model's n)")

    p = sub.add_parser("bench", help="time registration at several cloud sizes", formatter_class=fmt)
    p.add_argument("--checkpoint", default=None, help="model checkpoint (default: untrained model)")
    p.add_argument("--sizes", type=int, nargs="+", default=[512, 1024, 2048], help="points per cloud")
    p.add_argument("--repeats", type=int, default=3, help="timed runs per size")
    p.add_argument("--seed", type=int, default=0, help="seed for the benchmark clouds")
    return parser


def _transform_text(M: np.ndarray) -> str:
    return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in M) + "\n"


def cmd_gen(cfg: RunConfig, args) -> int:
    dc = cfg.dataset_config()
    pairs = data.generate_pairs(dc, cfg.data.pairs, cfg.data.shapes)
    data.write_dataset(args.out, pairs, dc, cfg.data.shapes)
    overlaps = np.array([data.overlap_fraction(p, cfg.model.threshold) for p in pairs])
    print(f"pairs\t{len(pairs)}")
    print(f"points_per_cloud\t{dc.keep_points}")
    if len(pairs):
        print(f"overlap_mean\t{overlaps.mean():.6f}")
        print(f"overlap_min\t{overlaps.min():.6f}")
        print(f"overlap_max\t{overlaps.max():.6f}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    dataset = data.read_dataset(args.dataset)
    tc = cfg.train_config()
    start = 0
    opt_state = None
    if args.resume:
        model, meta, opt_state = load_model(args.resume)
        start = int(meta.get("epoch", 0))
        log.info("resuming from %s at epoch %d", args.resume, start)
    else:
        model = ModelBundle(cfg.model, seed=cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.txt")

    def progress(rec):
        log.debug("epoch %d step %d L_total %.6f", rec.epoch, rec.step, rec.total)

    result = train(model, dataset, tc, out, optimizer_state=opt_state, start_epoch=start, progress=progress)
    save_model(out / "final.ckpt", result.model, meta={"epoch": max(start, tc.epochs)})
    for epoch, value in enumerate(result.epoch_means(), start=start + 1):
        print(f"epoch\t{epoch}\tmean_L_total\t{value:.17g}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    dataset = data.read_dataset(args.dataset)
    algorithm = cfg.eval.algorithm
    model = None
    if algorithm == "mfgnet":
        ckpt = args.checkpoint or cfg.paths.checkpoint
        if not ckpt:
            raise PcregError("--checkpoint is required for algorithm mfgnet")
        model, _, _ = load_model(ckpt)
    samples = dataset.samples()
    iters = args.iters or [model.config.n_iterations if model is not None else 0]
    dump = None
    if args.dump_matching:
        base = Path(args.dump_matching)
        if algorithm != "mfgnet":
            log.warning("--dump-matching only applies to algorithm mfgnet")

        sweep = {"n": None}

        def dump(i, n, M_f, M_c, M, c):
            dump_matching(base / f"n{sweep['n']}", f"pair_{i:05d}", n, M_f, M_c, M)

    rows = []
    for n in iters:
        if dump is not None:
            sweep["n"] = n
        rep = evaluate(
            model,
            samples,
            algorithm,
            n_iterations=n if algorithm == "mfgnet" else None,
            icp_max_iter=cfg.eval.icp_max_iter,
            icp_tol=cfg.eval.icp_tol,
            workers=cfg.eval.workers,
            dump=dump,
        )
        rows.append([algorithm, n, *rep.as_row(), rep.n_pairs])
    writer = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    writer.writerow(EVAL_HEADER)
    formatted = [[r[0], r[1], *(f"{v:.17g}" for v in r[2:6]), r[6]] for r in rows]
    writer.writerows(formatted)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVAL_HEADER)
            w.writerows(formatted)
    if len(rows) > 1:
        mae = [r[3] for r in rows]
        mono = all(b <= a for a, b in zip(mae, mae[1:]))
        log.info("MAE(R) non-increasing in n: %s", mono)
    return 0


def cmd_register(cfg: RunConfig, args) -> int:
    model, _, _ = load_model(args.checkpoint)
    source = data.load_cloud(args.source)
    target = data.load_cloud(args.target)
    result = register(model, source, target, n_iterations=args.iters)
    for n, rec in enumerate(result.iterations, start=1):
        print(
            f"iteration {n}: response_ratio={rec.response_ratio:.6g} "
            f"mean_credibility={rec.mean_credibility:.6g} objective={rec.objective:.6g}"
            + (" (skipped: degenerate)" if rec.skipped else ""),
            file=sys.stderr,
        )
    M = result.transform.matrix()
    check_rotation(M[:3, :3], 1e-6)
    text = _transform_text(M)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    if args.checkpoint:
        model, _, _ = load_model(args.checkpoint)
    else:
        model = ModelBundle(cfg.model, seed=cfg.train.seed)
    print("points\tseconds_median\tseconds_min")
    for size in args.sizes:
        dc = data.DatasetConfig(n_points=int(np.ceil(size / 0.75)), keep_points=size, seed=args.seed)
        pair = data.generate_pairs(dc, 1)[0]
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            register(model, pair.source, pair.target)
            times.append(time.perf_counter() - t0)
        print(f"{size}\t{np.median(times):.6f}\t{np.min(times):.6f}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "register": cmd_register,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except (PcregError, OSError) as exc:
        print(f"pcreg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
