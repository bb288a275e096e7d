"""Command line interface: ``treeood <command> ...`` or ``python -m treeood``.

Every flag that mirrors a `RunConfig` field overrides the value from
``--config``; flags left out fall through to the file, then to the defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing

import marshmallow as ma
import numpy as np
from marshmallow import validate

from treeood import core, fields, metrics, pipeline
from treeood.config import OBJECTIVES, RunConfig, load_config
from treeood.exceptions import ParameterError, TreeOODError
from treeood.graph import GraphCollection
from treeood.losses import ScoreReport
from treeood.nn import GraphEncoder
from treeood.weights import load_weights, save_weights

logger = logging.getLogger("treeood")

__all__ = ["build_parser", "main"]

# argparse dest => RunConfig data key
_CONFIG_FLAGS = {
    "k": "k",
    "r": "r",
    "hidden_dim": "hidden_dim",
    "tau": "tau",
    "lambda_": "lambda",
    "epochs": "epochs_pretrain",
    "epochs_tt": "epochs_testtime",
    "lr": "lr",
    "batch_size": "batch_size",
    "seed": "seed",
    "objective": "objective",
    "workers": "workers",
    "cache_dir": "cache_dir",
    "degree_features": "degree_features",
    "format": "dataset_format",
}

_SIZES = fields.DelimitedList(fields.Int(validate=validate.Range(min=5)))


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument(
        "--degree-features",
        type=int,
        metavar="MAX_DEGREE",
        help="use one-hot node degrees (capped at MAX_DEGREE) as node features",
    )
    parser.add_argument("--format", choices=["tud", "json"], help="dataset format")


def _add_tree_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int, help="coding tree height")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--cache-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treeood",
        description="Test-time graph OOD detection with structural-entropy coding trees.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    build = commands.add_parser("build-trees", help="build (and cache) coding trees")
    build.add_argument("dataset")
    build.add_argument("--out", help="write the trees as JSON")
    _add_common(build)
    _add_tree_flags(build)

    train = commands.add_parser("pretrain", help="pre-train the graph encoder")
    train.add_argument("id_train", nargs="?")
    train.add_argument("--out", required=True, help="weight file to write")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--hidden-dim", type=int)
    train.add_argument("--tau", type=float)
    train.add_argument("-r", type=int, help="random-walk encoding length")
    _add_common(train)

    detect = commands.add_parser("detect", help="adapt a tree encoder and score test graphs")
    detect.add_argument("weights")
    detect.add_argument("id_test", nargs="?")
    detect.add_argument("ood_test", nargs="?")
    detect.add_argument("--out", required=True, help="report.json to write")
    detect.add_argument("--lambda", dest="lambda_", type=float)
    detect.add_argument("--tau", type=float)
    detect.add_argument("--epochs-tt", type=int)
    detect.add_argument("--lr", type=float)
    detect.add_argument("--batch-size", type=int)
    detect.add_argument("--objective", choices=OBJECTIVES)
    _add_common(detect)
    _add_tree_flags(detect)

    baseline = commands.add_parser(
        "baseline", help="score test graphs by their structural entropy range alone"
    )
    baseline.add_argument("id_train", nargs="?")
    baseline.add_argument("id_test", nargs="?")
    baseline.add_argument("ood_test", nargs="?")
    baseline.add_argument("--out", required=True, help="report.json to write")
    baseline.add_argument(
        "--coverage",
        type=float,
        default=0.95,
        help="central share of training entropies counted as in-distribution",
    )
    _add_common(baseline)
    _add_tree_flags(baseline)

    evaluate = commands.add_parser("eval", help="metrics of a report.json")
    evaluate.add_argument("report")
    evaluate.add_argument("--density-out", help="CSV of the ID/OOD score densities")
    evaluate.add_argument("--bins", type=int, default=20)

    bench = commands.add_parser("bench", help="time coding tree construction")
    bench.add_argument("--sizes", default="1000,2000,4000,8000,16000,32000,64000")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--out", help="CSV to write")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: getattr(args, dest)
        for dest, key in _CONFIG_FLAGS.items()
        if getattr(args, dest, None) is not None
    }
    return load_config(getattr(args, "config", None), overrides)


def _dataset(
    path: str | None, fallback: str | None, what: str, config: RunConfig
) -> GraphCollection:
    path = path or fallback
    if path is None:
        raise ParameterError(f"no {what} dataset given (argument or config file)")
    return core.parse(path, format=config.dataset_format)


def _build_trees(args: argparse.Namespace) -> int:
    config = _config(args)
    collection = _dataset(args.dataset, None, "input", config)
    trees = pipeline.preprocess_trees(config, collection)
    logger.info("built %d of %d tree(s)", sum(t is not None for t in trees), len(trees))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fp:
            json.dump(
                {"k": config.k, "trees": [None if t is None else t.to_dict() for t in trees]},
                fp,
            )
    return 0


def _pretrain(args: argparse.Namespace) -> int:
    config = _config(args)
    id_train = _dataset(args.id_train, config.id_train, "ID training", config)
    encoder = pipeline.pretrain(config, id_train)
    save_weights(args.out, encoder)
    return 0


def _detect(args: argparse.Namespace) -> int:
    config = _config(args)
    encoder = load_weights(args.weights)
    if not isinstance(encoder, GraphEncoder):
        raise ParameterError(f"{args.weights} does not hold a graph encoder")
    id_test = _dataset(args.id_test, config.id_test, "ID test", config)
    ood_test = _dataset(args.ood_test, config.ood_test, "OOD test", config)
    _, report = pipeline.detect(encoder, config, id_test, ood_test)
    report.save(args.out)
    return 0


def _baseline(args: argparse.Namespace) -> int:
    config = _config(args)
    id_train = _dataset(args.id_train, config.id_train, "ID training", config)
    id_test = _dataset(args.id_test, config.id_test, "ID test", config)
    ood_test = _dataset(args.ood_test, config.ood_test, "OOD test", config)
    test = GraphCollection(id_test.graphs + ood_test.graphs)
    scores = metrics.entropy_range_scores(
        id_train, test, k=config.k, coverage=args.coverage
    )
    is_ood = np.r_[np.zeros(len(id_test), dtype=bool), np.ones(len(ood_test), dtype=bool)]
    area = metrics.auc(scores, is_ood)
    logger.info("entropy range AUC %.4f over %d graphs", area, len(test))
    ScoreReport(scores, is_ood, area, np.arange(len(test))).save(args.out)
    return 0


def _evaluate(args: argparse.Namespace) -> int:
    report = ScoreReport.load(args.report)
    if report.is_ood is None:
        raise ParameterError(f"{args.report} has no labels to evaluate against")
    summary = {
        "auc": metrics.auc(report.scores, report.is_ood),
        "fpr95": metrics.fpr_at_tpr(report.scores, report.is_ood),
        "overlap": metrics.overlap_mass(report, args.bins),
    }
    if args.density_out:
        metrics.export_density(report, args.bins, args.density_out)
    print(json.dumps(summary))
    return 0


def _bench(args: argparse.Namespace) -> int:
    sizes = _SIZES.deserialize(args.sizes)
    records = metrics.bench_tree_construction(sizes, args.seed, repeats=args.repeats)
    if args.out:
        metrics.write_bench_csv(records, args.out)
    for record in records:
        print(
            f"{record.node_count}\t{record.edge_count}\t"
            f"{record.wall_time_seconds:.4f}\t{record.peak_bytes}"
        )
    return 0


_COMMANDS: dict[str, typing.Callable[[argparse.Namespace], int]] = {
    "build-trees": _build_trees,
    "pretrain": _pretrain,
    "detect": _detect,
    "baseline": _baseline,
    "eval": _evaluate,
    "bench": _bench,
}


def main(argv: typing.Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except (TreeOODError, ma.ValidationError) as error:
        logger.error("%s: %s", type(error).__name__, error)
        return 1


if __name__ == "__main__":
    sys.exit(main())
