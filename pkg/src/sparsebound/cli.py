"""Command-line entry point: ``sparsebound <command> ...``."""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .arch import (
    LayerSpec,
    binary_tree,
    conv_arch,
    conv_l_h,
    degree,
    load_arch,
    max_path_pred_product,
    reference_conv_model,
    parameter_count,
    random_dag,
    save_arch,
)
from .bounds import bound_report, scalar_head
from .data import (
    binary_subset,
    fetch_idx_files,
    load_dataset,
    load_idx_pair,
    read_checksums,
    save_dataset,
    synth_dataset,
)
from .sweep import SweepConfig, comparison, format_comparison, run_sweep
from .tensor import load_weights, save_weights
from .train import TrainConfig, TrainingDiverged, load_config, train


def _write_json(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# -- arch -----------------------------------------------------------------------


def cmd_arch_describe(args) -> int:
    g = load_arch(args.file)
    pp, path = max_path_pred_product(g)
    print(f"layers (L):        {g.L}")
    print(f"widths (d_0..d_L): {list(g.widths)}")
    print(f"channels:          {list(g.channels)}")
    print(f"shared:            {g.shared}")
    print(f"deg:               {degree(g)}")
    print(f"path product:      {pp:.6g}  (witness {path})")
    print(f"parameters:        {parameter_count(g, args.weight_norm_layers)}")
    return 0


def cmd_arch_build(args) -> int:
    if args.kind == "tree":
        g = binary_tree(args.depth)
    elif args.kind == "conv-l-h":
        g, _ = conv_l_h(args.depth, args.width, counting=args.counting)
    elif args.kind == "reference":
        g = reference_conv_model(hidden_fc=args.hidden_fc)
    elif args.kind == "sweep":
        specs = [LayerSpec("conv", 2, 2, 0, args.width) for _ in range(4)]
        specs.append(LayerSpec("fc", out_channels=2, bias=True))
        g = conv_arch((1, 16, 16), specs)
    else:
        g = random_dag(np.random.default_rng(args.seed or 0), args.depth)
    save_arch(g, args.output)
    print(f"wrote {args.output}")
    return 0


# -- data -----------------------------------------------------------------------


def cmd_data_synth(args) -> int:
    ds = synth_dataset(args.seed or 0, args.m, (1, args.size, args.size), noise=args.noise)
    save_dataset(ds, args.output)
    print(f"wrote {ds.m} images to {args.output}")
    return 0


def cmd_data_fetch(args) -> int:
    files = fetch_idx_files(args.url, args.dest, read_checksums(args.checksums))
    for f in files:
        print(f"verified {f}")
    return 0


def cmd_data_subset(args) -> int:
    x, y = load_idx_pair(args.source, args.split)
    ds = binary_subset(x, y, args.classes[0], args.classes[1], args.m, args.seed or 0, source=str(args.source))
    save_dataset(ds, args.output)
    print(f"wrote {ds.m} images of classes {args.classes} to {args.output}")
    return 0


# -- train / sweep ------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    g = load_arch(args.arch)
    tr = load_dataset(args.data)
    te = load_dataset(args.test_data) if args.test_data else None
    out = Path(args.out or "train-out")
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = train(g, tr, cfg, te)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 2
    save_weights(out / "weights.bin", res.weights.weights(), {"config": cfg.to_dict()})
    _write_json({"config": cfg.to_dict(), "history": res.history}, out / "history.json")
    last = {k: v[-1] for k, v in res.history.items() if v}
    print(json.dumps(last, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.threads:
        d["workers"] = args.threads
    cfg = SweepConfig.from_dict(d)
    out = Path(args.out or "sweep-out")
    result = run_sweep(cfg, out)
    print((out / "sweep.csv").read_text(), end="")
    failed = sum(1 for r in result["records"] if r["status"] != "ok")
    if failed:
        print(f"{failed} cell(s) failed; see sweep.json", file=sys.stderr)
    return 0


# -- bounds ---------------------------------------------------------------------


def _load_triplet(args):
    g = load_arch(args.arch)
    w = load_weights(args.weights, g)
    ds = load_dataset(args.data)
    return g, w, ds


def cmd_bound(args) -> int:
    g, w, ds = _load_triplet(args)
    g1, w1 = scalar_head(g, w)
    rep = bound_report(g1, w1, ds, ds.labels, args.delta, args.gamma, args.weight_norm_layers)
    _write_json(rep.to_dict(), args.out)
    return 0


def cmd_report(args) -> int:
    g, w, ds = _load_triplet(args)
    try:
        c = comparison(g, w, ds, args.delta, args.gamma, args.weight_norm_layers)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    sys.stdout.write(format_comparison(c))
    if args.out:
        _write_json(c, args.out)
    return 0


# -- verify ------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from . import checks

    seed = 0 if args.seed is None else args.seed
    fn = {
        "peeling": checks.check_peeling,
        "rademacher": checks.check_dominance,
        "concentration": checks.check_concentration,
        "lambda": checks.check_lambda,
    }[args.what]
    report = fn(seed=seed, trials=args.trials)
    _write_json(report, args.out)
    return 0 if report["violations"] == 0 else 1


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def add_globals(parser, default):
        parser.add_argument("--seed", type=int, default=default, help="random seed")
        parser.add_argument("--threads", type=int, default=default, help="worker processes (sweep)")
        parser.add_argument("--out", default=default, help="output file or directory")

    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="sparsebound", description=__doc__)
    add_globals(p, None)
    p.add_argument("--version", action="version", version=f"sparsebound {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    arch = sub.add_parser("arch", help="architecture files").add_subparsers(dest="action", required=True)
    a = arch.add_parser("describe", parents=[common], help="print L, widths, deg, path product, parameters")
    a.add_argument("file")
    a.add_argument("--weight-norm-layers", type=int, default=0)
    a.set_defaults(fn=cmd_arch_describe)
    a = arch.add_parser("build", parents=[common], help="write a built-in architecture")
    a.add_argument("kind", choices=["tree", "conv-l-h", "reference", "sweep", "random"])
    a.add_argument("output")
    a.add_argument("--depth", type=int, default=3)
    a.add_argument("--width", type=int, default=16)
    a.add_argument("--counting", choices=["conv", "total"], default="conv")
    a.add_argument("--hidden-fc", action="store_true")
    a.set_defaults(fn=cmd_arch_build)

    data = sub.add_parser("data", help="datasets").add_subparsers(dest="action", required=True)
    a = data.add_parser("synth", parents=[common], help="oriented-band synthetic dataset")
    a.add_argument("output")
    a.add_argument("--m", type=int, required=True)
    a.add_argument("--size", type=int, default=16)
    a.add_argument("--noise", type=float, default=1.0)
    a.set_defaults(fn=cmd_data_synth)
    a = data.add_parser("fetch", parents=[common], help="download and verify the four IDX files")
    a.add_argument("--url", required=True)
    a.add_argument("--checksums", required=True, help="sha256sum-style file")
    a.add_argument("--dest", required=True)
    a.set_defaults(fn=cmd_data_fetch)
    a = data.add_parser("subset", parents=[common], help="binary subset of an IDX directory")
    a.add_argument("source")
    a.add_argument("output")
    a.add_argument("--classes", type=int, nargs=2, default=[0, 1])
    a.add_argument("--m", type=int, required=True)
    a.add_argument("--split", choices=["train", "test"], default="train")
    a.set_defaults(fn=cmd_data_subset)

    a = sub.add_parser("train", parents=[common], help="train one network")
    a.add_argument("--config")
    a.add_argument("--arch", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--test-data")
    a.set_defaults(fn=cmd_train)

    a = sub.add_parser("sweep", parents=[common], help="sweep over training-set sizes")
    a.add_argument("--config", help="JSON sweep configuration")
    a.set_defaults(fn=cmd_sweep)

    for name, fn, helptext in (
        ("bound", cmd_bound, "JSON report of every capacity quantity"),
        ("report", cmd_report, "compare our bound with the dense and parameter-counting bounds"),
    ):
        a = sub.add_parser(name, parents=[common], help=helptext)
        a.add_argument("--arch", required=True)
        a.add_argument("--weights", required=True)
        a.add_argument("--data", required=True)
        a.add_argument("--delta", type=float, default=0.01)
        a.add_argument("--gamma", type=float, default=None)
        a.add_argument("--weight-norm-layers", type=int, default=0)
        a.set_defaults(fn=fn)

    a = sub.add_parser("verify", parents=[common], help="numerical inequality checks")
    a.add_argument("what", choices=["peeling", "rademacher", "concentration", "lambda"])
    a.add_argument("--trials", type=int, default=None)
    a.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
