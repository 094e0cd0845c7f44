"""Command-line front end: ``dpflow train | analyze | data``.

Exit codes: 0 success, 1 runtime or rank failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys

from . import costmodel as cm
from .comm import WorldError, world_spawn
from .datasets import DataFormatError, Dataset, load_csv, load_idx, shard, synthetic
from .engine import Session
from .models import mlp, parse_mlp
from .parallel import ReplicaTrainer, records_csv


class UsageError(Exception):
    pass


def parse_data(spec: str) -> Dataset:
    """Load ``idx:<img>,<lbl>``, ``csv:<path>,<labelcol>[,<classes>]`` or
    ``synthetic:<seed>,<n>,<d>,<classes>``."""
    kind, _, rest = spec.partition(":")
    args = rest.split(",") if rest else []
    try:
        if kind == "idx" and len(args) == 2:
            return load_idx(args[0], args[1])
        if kind == "csv" and len(args) in (2, 3):
            classes = int(args[2]) if len(args) == 3 else None
            return load_csv(args[0], int(args[1]), classes)
        if kind == "synthetic" and len(args) == 4:
            seed, n, d, classes = (int(a) for a in args)
            return synthetic(seed, n, d, classes)
    except ValueError as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise UsageError(f"bad --data {spec!r}: {exc}") from None
    raise UsageError(
        f"bad --data {spec!r}; expected idx:<img>,<lbl> | csv:<path>,<labelcol> | "
        "synthetic:<seed>,<n>,<d>,<classes>"
    )


def parse_p_list(text: str) -> list[int]:
    """``"1,2,4"`` or ``"1..16"`` (inclusive range)."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            values = list(range(lo, hi + 1))
        else:
            values = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"bad --p {text!r}") from None
    if not values or min(values) < 1 or sorted(set(values)) != values:
        raise UsageError(f"--p must list ascending positive integers, got {text!r}")
    return values


# ---------------------------------------------------------------- train


def _train_rank(world, args, sizes):
    ds = parse_data(args.data)
    model = mlp(sizes, dtype="float64" if args.dtype == "f64" else "float32")
    session = Session(model.graph)
    session.initialize(args.seed + world.rank)
    trainer = ReplicaTrainer(session, world, model.loss, model.inputs, model.labels,
                             args.lr, args.batch, args.momentum)
    records = trainer.train(ds, args.steps, args.shuffle_seed)
    return records, trainer.digest()


def cmd_train(args) -> int:
    try:
        sizes = parse_mlp(args.model) if args.model else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = parse_data(args.data)
    if sizes is None:
        sizes = (ds.d, 128, ds.classes)
    if sizes[0] != ds.d or sizes[-1] != ds.classes:
        raise UsageError(f"model {args.model} does not fit data (d={ds.d}, classes={ds.classes})")

    results = world_spawn(args.ranks, lambda w: _train_rank(w, args, sizes), args.transport,
                          address=args.address)
    records, digest = results[0]
    digests = {d for _, d in results}
    text = records_csv(records)
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(text)
        report = sys.stdout
    else:
        sys.stdout.write(text)
        report = sys.stderr
    final = f"{records[-1].loss:.17g}" if records else "nan"
    print(f"final_loss={final} digest={digest} ranks={args.ranks}", file=report)
    if len(digests) != 1:
        print(f"error: replicas diverged: {sorted(digests)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- analyze


def _network(name: str) -> cm.NetworkSpec:
    if name.endswith(".json"):
        return cm.load_spec(name)
    try:
        return cm.builtin(name)
    except cm.CostModelError as exc:
        raise UsageError(str(exc)) from None


def cmd_analyze(args) -> int:
    names = list(cm.BUILTIN_NAMES) if args.spec == "all" else [args.spec]
    specs = [_network(n) for n in names]
    base = _network(args.base)
    p_list = parse_p_list(args.p)
    d = cm.DEFAULT_MACHINE
    try:
        machine = cm.MachineParams(
            args.alpha if args.alpha is not None else d.alpha,
            args.beta if args.beta is not None else d.beta,
            args.gamma if args.gamma is not None else d.gamma,
            args.bytes_per_param if args.bytes_per_param is not None else d.bytes_per_param,
        )
    except cm.CostModelError as exc:
        raise UsageError(str(exc)) from None

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["network", "base", "compute_ratio", "param_ratio", "comp_per_param_ratio",
                "p", "t_compute", "t_comm", "t_total", "speedup"])
    for spec in specs:
        ratios = cm.ratio_relative_to(spec, base)
        for row in cm.speedup_curve(spec, machine, p_list, args.tensors):
            w.writerow([spec.name, base.name, *(f"{r:.17g}" for r in ratios), row.p,
                        *(f"{v:.17g}" for v in (row.t_compute, row.t_comm, row.t_total, row.speedup))])
    _emit(buf.getvalue(), args.out)
    return 0


# ---------------------------------------------------------------- data


def cmd_data(args) -> int:
    ds = parse_data(args.data)
    lines = [f"n={ds.n}", f"d={ds.d}", f"classes={ds.classes}",
             "histogram=" + ",".join(str(c) for c in ds.histogram())]
    ranges = [shard(ds, r, args.shards) for r in range(args.shards)]
    lines.append("shard_sizes=" + ",".join(str(len(r)) for r in ranges))
    for r, rng in enumerate(ranges):
        lines.append(f"shard {r}: [{rng.start}, {rng.stop})")
    print("\n".join(lines))
    return 0


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w", newline="") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _positive(v: str) -> int:
    i = int(v)
    if i < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return i


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an MLP with synchronous data-parallel SGD")
    t.add_argument("--data", required=True)
    t.add_argument("--model", help="mlp:<d>-<h1>-...-<classes> (default d-128-classes)")
    t.add_argument("--ranks", type=_positive, default=1)
    t.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    t.add_argument("--address", help="socket rendezvous host:port (default: ephemeral loopback)")
    t.add_argument("--batch", type=_positive, default=64)
    t.add_argument("--steps", type=int, default=100)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.0)
    t.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--shuffle-seed", type=int, default=None)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="scaling-model ratios and speedup curves")
    a.add_argument("--spec", default="all", help="built-in name, descriptor .json, or 'all'")
    a.add_argument("--base", default="alexnet")
    a.add_argument("--p", default="1,2,4,8,16")
    a.add_argument("--alpha", type=float)
    a.add_argument("--beta", type=float)
    a.add_argument("--gamma", type=float)
    a.add_argument("--bytes-per-param", type=int, choices=(4, 8))
    a.add_argument("--tensors", type=_positive, default=None,
                   help="reduce the parameters as this many equal tensors (default: one per layer)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("data", help="summarize a dataset and its shards")
    d.add_argument("--data", required=True)
    d.add_argument("--shards", type=_positive, default=1)
    d.set_defaults(func=cmd_data)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train":
        if args.steps < 0:
            parser.error("--steps must be >= 0")
        if args.lr <= 0 or not 0 <= args.momentum < 1:
            parser.error("--lr must be positive and --momentum in [0, 1)")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except WorldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, cm.CostModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
