"""Command-line entry point: generate, augment, train, detect, evaluate,
metrics.

Exit codes: 0 success, 1 validation error (bad flags or inputs), 2 runtime
failure. Machine-readable results go to stdout, logs to stderr. Every run
is fully specified by its flags plus named files; all randomness flows
from explicit --seed values.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import data as D
from . import evaluation as E
from . import model as M
from . import report as R
from . import tensor as T
from . import training as TR
from .checkpoint import load_checkpoint
from .errors import GridDetError, UsageError


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="griddet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--size", type=int, default=112, help="square image size in pixels")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output dataset directory")

    a = sub.add_parser("augment", help="expand a dataset 11x with the standard recipe")
    a.add_argument("--in", dest="in_dir", required=True, help="input dataset directory")
    a.add_argument("--out", required=True, help="output dataset directory")
    a.add_argument("--recipe", help="recipe file (key=value); defaults otherwise")
    a.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", default="desk", help="network config file or preset name (default/desk)")
    t.add_argument("--run", help="run config file (key=value); defaults otherwise")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--split", help="split manifest; train only on its 'train' rows")
    t.add_argument("--resume", action="store_true", help="continue from final.gdk in --out")
    t.add_argument("--init-seed", type=int, default=0, help="weight init seed")
    t.add_argument("--no-figures", action="store_true", help="skip the loss-curve figure")

    d = sub.add_parser("detect", help="run detection on one image")
    d.add_argument("--weights", required=True, help="GDK1 checkpoint")
    d.add_argument("--image", required=True, help="input P6 image")
    d.add_argument("--conf", type=float, default=0.25, help="confidence floor")
    d.add_argument("--nms", type=float, default=0.45, help="NMS IoU threshold")
    d.add_argument("--config", help="network config; defaults to network.cfg beside the weights")

    e = sub.add_parser("evaluate", help="evaluate a detector over a dataset")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", help="split manifest; restricts to --tag rows")
    e.add_argument("--tag", choices=("train", "test"), default="test")
    e.add_argument("--conf", type=float, default=0.25)
    e.add_argument("--nms", type=float, default=0.45)
    e.add_argument("--config", help="network config; defaults to network.cfg beside the weights")
    e.add_argument("--report-dir", help="write report.txt, report.csv and metrics.png here")

    m = sub.add_parser("metrics", help="metric calculator from raw counts")
    m.add_argument("--tp", type=int, required=True)
    m.add_argument("--fp", type=int, required=True)
    m.add_argument("--fn", type=int, required=True)
    m.add_argument("--tn", type=int, default=0)

    return p


# ---------------------------------------------------------------------------

def _resolve_network(weights: str, config_flag: str | None) -> M.Network:
    if config_flag:
        cfg = M.load_network_config(config_flag)
    else:
        sibling = Path(weights).parent / "network.cfg"
        cfg = M.load_network_config(sibling) if sibling.exists() else M.load_network_config("desk")
    net = M.build_network(cfg, seed=0)
    net.load_state(load_checkpoint(weights))
    return net


def _cmd_generate(args) -> int:
    manifest = D.generate_synthetic(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(manifest.samples)} samples to {args.out}")
    return 0


def _cmd_augment(args) -> int:
    recipe = aug.load_recipe(args.recipe) if args.recipe else aug.Recipe()
    result = aug.augment_dataset(args.in_dir, args.out, recipe, args.seed)
    print(result.manifest_path)
    print(f"outputs: {len(result.rows)}")
    if result.inputs_skipped or result.variants_skipped:
        print(f"skipped: {result.inputs_skipped} inputs, {result.variants_skipped} variants",
              file=sys.stderr)
        return 1
    return 0


def _cmd_train(args) -> int:
    cfg = M.load_network_config(args.config)
    run = TR.load_run_config(args.run) if args.run else TR.RunConfig()
    manifest = D.load_dataset(args.data)
    samples = manifest.samples
    if args.split:
        assignments = D.read_split(args.split)
        samples = [s for s in samples if assignments.get(s.image_path.name) == "train"]
        if not samples:
            raise UsageError(f"{args.split}: no train rows match {args.data}")
    dataset = D.DetectionDataset(samples, cfg.input_size)
    net = M.build_network(cfg, seed=args.init_seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if str(args.config) in M.PRESETS:
        import importlib.resources

        cfg_text = importlib.resources.files("griddet").joinpath(f"configs/{args.config}.cfg").read_text()
    else:
        cfg_text = Path(args.config).read_text()
    (out_dir / "network.cfg").write_text(cfg_text)
    result = TR.train(net, dataset, run, out_dir, resume=args.resume)
    if not args.no_figures:
        R.plot_training_curves(result.metrics_path, out_dir / "training_curves.png")
    print(f"final loss {result.final_loss:.6g} best {result.best_loss:.6g}")
    print(result.final_checkpoint)
    return 0


def _cmd_detect(args) -> int:
    net = _resolve_network(args.weights, args.config)
    size = net.config.input_size
    img = D.resize_image(D.load_image(args.image), size, size)
    x = T.Tensor((img.astype(np.float32) / 255.0).transpose(2, 0, 1)[None])
    boxes = M.detect(net, x, args.conf, args.nms)
    for b in boxes:
        print(f"{b.class_id} {b.confidence:.4f} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}")
    return 0


def _cmd_evaluate(args) -> int:
    net = _resolve_network(args.weights, args.config)
    manifest = D.load_dataset(args.data)
    samples = list(manifest.samples)
    if args.split:
        assignments = D.read_split(args.split)
        samples = [s for s in samples if assignments.get(s.image_path.name) == args.tag]
    if not samples:
        raise UsageError("evaluation selection is empty")
    report = E.evaluate(net, samples, args.conf, args.nms)
    text = E.format_report(report)
    csv_line = E.report_csv_line(report)
    print(text)
    print(csv_line)
    if args.report_dir:
        rd = Path(args.report_dir)
        rd.mkdir(parents=True, exist_ok=True)
        (rd / "report.txt").write_text(text + "\n")
        (rd / "report.csv").write_text(csv_line + "\n")
        R.plot_metric_report(report, rd / "metrics.png")
    return 0


def _cmd_metrics(args) -> int:
    if min(args.tp, args.fp, args.fn, args.tn) < 0:
        raise UsageError("counts must be non-negative")
    counts = E.ConfusionCounts(tp=args.tp, tn=args.tn, fp=args.fp, fn=args.fn)
    report = E.MetricReport.from_counts(counts)
    print(E.format_report(report))
    print(E.report_csv_line(report))
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "detect": _cmd_detect,
    "evaluate": _cmd_evaluate,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except GridDetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
