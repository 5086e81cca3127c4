"""Command-line entry point: ``jointface <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, parse_overrides
from .dataset import Dataset, build_dataset
from .errors import ConfigError, JointFaceError
from .proposal import propose_arrays
from .losses import softmax
from .tensor import no_grad

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set run.iterations=100")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jointface", description="Joint face detection and attribute prediction toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--count", type=int, default=2500)
    p.add_argument("--style", choices=("line", "fill"), help="glyph style (overrides gen.style)")

    for name, text in (("train", "train the joint model from scratch"),
                       ("finetune", "fine-tune a checkpoint on another dataset"),
                       ("baseline", "train and evaluate an attribute-only baseline")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--data", help="dataset directory (overrides run.data)")
        p.add_argument("--run-dir", required=True)
        p.add_argument("--iterations", type=int)
        if name == "finetune":
            p.add_argument("--checkpoint", required=True)
        if name == "baseline":
            p.add_argument("--mode", choices=("cropped", "aligned"), default="cropped")

    p = sub.add_parser("eval", help="evaluate a checkpoint and write reports")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--run-dir", help="output directory (default: alongside the checkpoint)")
    p.add_argument("--split", help="split to evaluate (overrides run.eval_split)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--only", action="append", help="restrict to named checks")

    p = sub.add_parser("propose", help="write region proposals for one record")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--record", type=int, default=0)
    p.add_argument("--top-k", type=int)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("visualize", help="export a channel-aggregated feature map")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--record", type=int, default=0)
    p.add_argument("--layer", default="conv5")
    p.add_argument("--out", required=True, help="output .csv or .pgm")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    flat = parse_overrides(getattr(args, "set", []))
    if getattr(args, "seed", None) is not None:
        flat["run.seed"] = args.seed
    if getattr(args, "data", None):
        flat["run.data"] = args.data
    if getattr(args, "iterations", None) is not None:
        flat["run.iterations"] = args.iterations
        if "run.decay_iters" not in flat:
            flat["run.decay_iters"] = tuple(d for d in cfg.decay_iters if d < args.iterations)
    if getattr(args, "style", None):
        flat["gen.style"] = args.style
    if getattr(args, "split", None):
        flat["run.eval_split"] = args.split
    return RunConfig.from_flat(flat, cfg) if flat else cfg


def _snapshot(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    manifest = build_dataset(args.out, cfg.seed, args.count, cfg.gen)
    print(f"wrote {manifest['count']} records to {args.out} "
          f"(train/val/test = {'/'.join(str(v) for v in manifest['split_counts'].values())})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train
    cfg = _config(args).with_updates(mode="joint")
    run_dir = Path(args.run_dir)
    _snapshot(cfg, run_dir)
    res = train(cfg, run_dir)
    print(f"trained {cfg.iterations} iterations; final total loss "
          f"{res.log[-1][6] if res.log else float('nan'):.4f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .train import finetune
    cfg = _config(args).with_updates(mode="joint", checkpoint_in=args.checkpoint)
    run_dir = Path(args.run_dir)
    _snapshot(cfg, run_dir)
    res = finetune(args.checkpoint, cfg, run_dir)
    print(f"fine-tuned {cfg.iterations} iterations; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .train import run_baseline, write_reports
    cfg = _config(args).with_updates(mode=f"{args.mode}-baseline")
    run_dir = Path(args.run_dir)
    _snapshot(cfg, run_dir)
    res = run_baseline(cfg, run_dir)
    write_reports({args.mode: res.eval}, run_dir)
    print(f"{args.mode} baseline mean error {res.eval.report.mean_error:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint, open_dataset, write_reports
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    ds = open_dataset(cfg.data)
    out = Path(args.run_dir) if args.run_dir else Path(args.checkpoint).parent / "eval"
    _snapshot(cfg, out)
    res = evaluate_checkpoint(ckpt, ds, cfg)
    name = "joint" if ckpt.kind == "joint" else cfg.mode.replace("-baseline", "")
    files = write_reports({name: res}, out)
    print(f"mean error {res.report.mean_error:.4f}"
          + (f", PR-AUC {res.curve.auc:.4f}" if res.curve is not None else "")
          + f"; reports in {out}")
    for f in files.values():
        print(f"  {f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import LAYER_CHECKS, run_suite
    names = args.only or list(LAYER_CHECKS)
    unknown = set(names) - set(LAYER_CHECKS)
    if unknown:
        raise UsageError(f"unknown checks {sorted(unknown)}; choose from {sorted(LAYER_CHECKS)}")
    worst, failed = {}, 0
    for name, seed, rep in run_suite(range(args.seeds), args.tol, names):
        worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
        if not rep.passed:
            failed += 1
            print(f"FAIL {name} seed={seed} rel={rep.max_rel_error:.3e} at {rep.worst_index}")
    for name in names:
        status = "ok " if worst[name] <= args.tol else "FAIL"
        print(f"{status} {name:<12} max rel error {worst[name]:.3e}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def _record(cfg, args):
    ds = Dataset(cfg.data)
    if not 0 <= args.record < len(ds):
        raise UsageError(f"record {args.record} out of range [0, {len(ds)})")
    return ds.records[args.record]


def cmd_propose(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "joint":
        raise UsageError("propose needs a joint-model checkpoint")
    model = ckpt.build_model()
    rec = _record(cfg, args)
    mc = model.cfg
    with no_grad():
        feat = model.features(rec.image)
        logits, deltas = model.rpn(feat)
    h, w = rec.image.shape[-2:]
    boxes, scores, idx = propose_arrays(softmax(logits.data.astype(np.float64))[:, 1], deltas.data,
                                        model.anchors(feat.shape[2:]), (w, h), args.top_k or mc.eval_top_k,
                                        mc.eval_nms if mc.use_nms else None)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["rank", "x1", "y1", "x2", "y2", "score", "anchor"])
        for r, (b, s, a) in enumerate(zip(boxes, scores, idx)):
            wr.writerow([r, *(f"{v:.3f}" for v in b), f"{s:.6f}", int(a)])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    rec = _record(cfg, args)
    grid = model.export_feature_map(rec.image, args.layer)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".pgm":
        pix = np.round(grid * 255).astype(np.uint8)
        out.write_bytes(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode() + pix.tobytes())
    else:
        np.savetxt(out, grid, delimiter=",", fmt="%.6f")
    print(json.dumps({"layer": args.layer, "shape": list(grid.shape), "out": str(out)}))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_finetune, "baseline": cmd_baseline,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "propose": cmd_propose, "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (JointFaceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
