"""Command-line entry point: ``nmn <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors and 2 on data or integrity
errors. Machine-readable results go to standard output unless an output
path is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from . import __version__
from .config import TrainConfig
from .datatools import degree_diff_distribution, kg_stats, make_synthetic_pair, sparsify
from .errors import NMNError
from .evaluation import DEFAULT_BUCKETS, InferenceContext, bucketed_hits, hits_at_k, rank_all
from .kg import load_dataset, split_alignments, write_kg
from .matching import cross_match
from .model import ModelParams, load_checkpoint, save_checkpoint
from .neighborhood import sample_neighborhood
from .training import TrainingData, run_training, write_log

logger = logging.getLogger("nmn")

DATASET_FILES = ("ent_ids_1", "ent_ids_2", "triples_1", "triples_2", "ref_ent_ids")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_globals(parser: argparse.ArgumentParser, defaults: bool) -> None:
    # subcommand copies must not overwrite values given before the subcommand
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, default=d(None), help="seed for every random choice (overrides config)")
    parser.add_argument("--threads", type=int, default=d(1), help="torch intra-op threads")
    parser.add_argument("--float64", action=argparse.BooleanOptionalAction, default=d(True),
                        help="64-bit arithmetic (default); --no-float64 trains in 32 bits")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _add_globals(common, defaults=False)

    parser = _Parser(prog="nmn", description="Neighborhood matching entity alignment.")
    _add_globals(parser, defaults=True)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="JSON-lines log (default <out>.log.jsonl)")
    p.add_argument("--vectors", default=None, help="word-vector file (default <data>/vectors.txt)")

    p = sub.add_parser("evaluate", parents=[common], help="Hits@k and bucketed accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=_int_list, default=[1, 10])
    p.add_argument("--buckets", type=_float_list, default=list(DEFAULT_BUCKETS))
    p.add_argument("--rescreen-width", type=int, default=None, help="re-ranked prefix size (0 = all)")
    p.add_argument("--report", default=None, help="JSON report path (default stdout)")
    p.add_argument("--ranks", default=None, help="per-entity rank CSV path")
    p.add_argument("--vectors", default=None)

    p = sub.add_parser("sparsify", parents=[common], help="drop a share of one KG's triples")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--keep", type=float, required=True)
    p.add_argument("--side", type=int, choices=(1, 2), default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats", parents=[common], help="entity/relation/triple counts as JSON")
    p.add_argument("--in", dest="inp", required=True)

    p = sub.add_parser("degree-diff", parents=[common], help="histogram of aligned-pair degree gaps (CSV)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--buckets", type=_float_list, default=list(DEFAULT_BUCKETS))
    p.add_argument("--out", default=None)

    p = sub.add_parser("dump-attention", parents=[common], help="cross-graph attention for one pair (CSV)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pair", nargs=2, type=int, required=True, metavar=("ID1", "ID2"))
    p.add_argument("--out", default=None)
    p.add_argument("--vectors", default=None)

    p = sub.add_parser("compare-sampling", parents=[common], help="learned vs random sampling per K (CSV)")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--K", dest="ks", type=_int_list, default=[3, 5])
    p.add_argument("--out", default=None)
    p.add_argument("--vectors", default=None)

    p = sub.add_parser("make-synth", parents=[common], help="write a synthetic KG pair")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--avg-degree", type=float, default=6.0)
    p.add_argument("--perturb", choices=("none", "drop_edges", "noise"), default="none")
    p.add_argument("--p", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--dim", type=int, default=300)
    p.add_argument("--hub-fraction", type=float, default=0.0)
    p.add_argument("--num-hubs", type=int, default=5)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _emit(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="\n")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _dtype(args):
    return torch.float64 if args.float64 else torch.float32


def _load_config(args) -> TrainConfig:
    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _test_pairs(ds, config: TrainConfig):
    return split_alignments(ds.gold, config.split_fraction, config.seed).test_pairs


def _checkpoint_and_config(args):
    model, config = load_checkpoint(args.checkpoint)
    config = config or TrainConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return model, config


def _cast(model: ModelParams, dtype) -> ModelParams:
    if dtype == torch.float64:
        return model
    for name, t in model.named().items():
        t.data = t.data.to(dtype)
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    config = _load_config(args)
    ds = load_dataset(args.data, args.vectors)
    data = TrainingData.from_dataset(ds, config)
    model = ModelParams.init(config, data.merged.features.shape[1], dtype=_dtype(args))
    result = run_training(config, data, model=model)
    save_checkpoint(args.out, result.model, config)
    write_log(result.log, args.log or f"{args.out}.log.jsonl")
    return 0


def _evaluate(model, config, ds, merged, rescreen_width):
    test = _test_pairs(ds, config)
    ctx = InferenceContext.build(model, merged, config.K, config.sampling, config.seed, config.matching)
    return test, rank_all(ctx, [a for a, _ in test], rescreen_width)


def cmd_evaluate(args) -> int:
    model, config = _checkpoint_and_config(args)
    ds = load_dataset(args.data, args.vectors)
    if any(k < 1 for k in args.k):
        raise UsageError("--k values must be >= 1")
    merged = ds.merged()
    model = _cast(model, _dtype(args))
    width = config.rescreen_width if args.rescreen_width is None else args.rescreen_width
    test, rankings = _evaluate(model, config, ds, merged, width)
    report = {
        "hits": {str(k): hits_at_k(rankings, test, k) for k in args.k},
        "buckets": [_bucket_json(b) for b in bucketed_hits(rankings, test, ds.g1, ds.g2, args.buckets)],
        "num_test": len(test),
        "rescreen_width": rankings.rescreen_width,
    }
    _emit(_json(report), args.report)
    if args.ranks:
        rows = [(a, b, rankings.rank_of(a, b), int(rankings.ranked[a][0])) for a, b in test]
        _emit(_csv(["source_id", "gold_id", "rank", "top1_id"], rows), args.ranks)
    return 0


def _bucket_json(b):
    return {"lo": b["lo"], "hi": None if b["hi"] == float("inf") else b["hi"], "count": b["count"],
            **({"hits1": b["hits1"]} if "hits1" in b else {})}


def cmd_sparsify(args) -> int:
    src = Path(args.inp)
    ds = load_dataset(src, with_features=False)
    seed = 0 if args.seed is None else args.seed
    kg = ds.g1 if args.side == 1 else ds.g2
    sparse = sparsify(kg, args.keep, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in DATASET_FILES + ("vectors.txt",):
        if (src / name).exists() and not name.endswith(f"_{args.side}"):
            shutil.copyfile(src / name, out / name)
    write_kg(sparse, out / f"ent_ids_{args.side}", out / f"triples_{args.side}")
    return 0


def cmd_stats(args) -> int:
    ds = load_dataset(args.inp, with_features=False)
    report = {}
    for key, kg in (("kg1", ds.g1), ("kg2", ds.g2)):
        e, r, t = kg_stats(kg)
        report[key] = {"entities": e, "relations": r, "triples": t}
    report["gold_pairs"] = len(ds.gold)
    _emit(_json(report), None)
    return 0


def cmd_degree_diff(args) -> int:
    ds = load_dataset(args.inp, with_features=False)
    hist = degree_diff_distribution(ds.g1, ds.g2, ds.gold, args.buckets)
    rows = [(_num(b["lo"]), "inf" if b["hi"] == float("inf") else _num(b["hi"]), b["count"]) for b in hist]
    _emit(_csv(["lo", "hi", "count"], rows), args.out)
    return 0


def _num(x: float):
    return int(x) if float(x).is_integer() else x


def cmd_dump_attention(args) -> int:
    model, config = _checkpoint_and_config(args)
    ds = load_dataset(args.data, args.vectors)
    merged = ds.merged()
    id1, id2 = args.pair
    n1, n2 = merged.node(1, id1), merged.node(2, id2)
    ctx = InferenceContext.build(model, merged, config.K, "learned", config.seed, config.matching)
    left = sample_neighborhood(n1, merged, ctx.h, model.sampler.W_s, config.K)
    right = sample_neighborhood(n2, merged, ctx.h, model.sampler.W_s, config.K)
    rows = []
    if len(left) and len(right):
        att = cross_match(left, right).attention_left_to_right.detach().numpy()
        for i, p in enumerate(left.neighbor_ids):
            for j, q in enumerate(right.neighbor_ids):
                rows.append((_name(ds, merged, p), _name(ds, merged, q), repr(float(att[i, j]))))
    _emit(_csv(["left_neighbor_name", "right_neighbor_name", "a_pq"], rows), args.out)
    return 0


def _name(ds, merged, node):
    side, eid = merged.entity(int(node))
    return (ds.g1 if side == 1 else ds.g2).entity_names[eid]


def cmd_compare_sampling(args) -> int:
    config = _load_config(args)
    ds = load_dataset(args.data, args.vectors)
    if any(k < 1 for k in args.ks):
        raise UsageError("--K values must be >= 1")
    merged = ds.merged()
    rows = []
    for K in args.ks:
        for mode in ("learned", "random"):
            cfg = config.replace(K=K, sampling=mode)
            data = TrainingData.from_dataset(ds, cfg, merged=merged)
            model = ModelParams.init(cfg, merged.features.shape[1], dtype=_dtype(args))
            result = run_training(cfg, data, model=model)
            test, rankings = _evaluate(result.model, cfg, ds, merged, cfg.rescreen_width)
            for a, b in test:
                hit = rankings.rank_of(a, b) == 1
                rows.append((a, mode, K, repr(hit / len(test))))
    _emit(_csv(["entity_id", "mode", "K", "hits1_contribution"], rows), args.out)
    return 0


def cmd_make_synth(args) -> int:
    pair = make_synthetic_pair(args.n, args.avg_degree, args.perturb, args.p, args.sigma,
                               seed=0 if args.seed is None else args.seed, dim=args.dim,
                               hub_fraction=args.hub_fraction, num_hubs=args.num_hubs)
    pair.write(args.out)
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sparsify": cmd_sparsify,
    "stats": cmd_stats,
    "degree-diff": cmd_degree_diff,
    "dump-attention": cmd_dump_attention,
    "compare-sampling": cmd_compare_sampling,
    "make-synth": cmd_make_synth,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"nmn {args.command}: {exc}\n")
        return 1
    except (NMNError, FileNotFoundError, KeyError, ValueError) as exc:
        sys.stderr.write(f"nmn {args.command}: error: {exc}\n")
        return 2


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch())
