"""Command line entry point: ``midl {train,sweep,metrics,plot,inspect-checkpoint}``.

Failures print a single ``error: <kind>: <message>`` line on stderr and exit
with status 1; usage errors exit with status 2.
"""
import argparse
import logging
import sys

from . import checkpoint
from .config import load_config
from .experiment import RunResult, evaluate, load_datasets, load_model, run_dir, sweep, train
from .metrics import metrics_to_csv
from .plot import emit_smi_scatter


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment JSON")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--output-dir", help="override output_dir")


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seeds=[args.seed])
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    return cfg


def cmd_train(args):
    cfg = _load(args)
    for r in train(cfg, evaluate_only=args.evaluate_only):
        f = r.final
        print(f"seed={r.seed} accuracy={f.accuracy:.4f} anr={f.anr:.4f} dir={run_dir(cfg, r.seed)}")


def cmd_sweep(args):
    cfg = _load(args)
    variants = [v for v in args.variants.split(",") if v]
    rows, _ = sweep(cfg, variants)
    for row in rows:
        print(f"{row['variant']}: accuracy={row['accuracy_mean']:.4f}+-{row['accuracy_std']:.4f} "
              f"anr={row['anr_mean']:.4f} smi={row['smi_nats_mean']:.4f}")


def cmd_metrics(args):
    cfg = _load(args)
    seed = cfg.seeds[0]
    model = load_model(cfg, args.checkpoint, seed)
    _, test = load_datasets(cfg.dataset, seed)
    rec, _ = evaluate(model, test, cfg, seed, cfg.epochs, with_smi=cfg.smi, with_latency=True)
    sys.stdout.write(metrics_to_csv([rec]))


def cmd_plot(args):
    results = [RunResult.load(p) for p in args.results]
    emit_smi_scatter(results, args.output)
    print(args.output)


def cmd_inspect(args):
    for name, shape in checkpoint.inspect(args.file):
        print(f"{name}\t{'x'.join(str(d) for d in shape) or 'scalar'}")


def build_parser():
    ap = argparse.ArgumentParser(prog="midl", description="MID-L experiment runner")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train every configured seed")
    _common(p)
    p.add_argument("--evaluate-only", action="store_true", help="report initial-weight metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train several gate variants and aggregate")
    _common(p)
    p.add_argument("--variants", default="f1_only,f2_only,fixed_alpha=0.5,random_topk,gumbel,midl")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("metrics", help="evaluate a checkpoint on the configured test set")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("plot", help="SVG scatter of per-neuron MI vs activation frequency")
    p.add_argument("results", nargs="+", help="result.json files")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("inspect-checkpoint", help="list tensor names and shapes")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
