import argparse
import json
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from graph_informer.src.constants import (
    BUILTIN_SET_NAMES,
    GRADCHECK_MODEL,
    GRADCHECK_ROUTE_FEATURES,
    GRADCHECK_TOLERANCE,
    ISO_TEST_ROUTE_FEATURES,
    SEPARATION_THRESHOLD,
    TOY_DATA,
    TOY_MODEL,
    TOY_ROUTE_FEATURES,
)
from graph_informer.src.errors import (
    CheckpointError,
    ConfigurationError,
    GraphFormatError,
    GraphInformerError,
    TrainingError,
)
from graph_informer.src.graphs import (
    Graph,
    RouteFeatureConfig,
    batch,
    parse_graph6,
    read_graph6_file,
    read_graph_json_file,
    route_features,
)
from graph_informer.src.informer import (
    InformerConfig,
    InformerModel,
    attention_dump,
    load_checkpoint,
    predict,
)
from graph_informer.src.isomorphism import (
    builtin_graphs,
    format_separation_table,
    iso_test_config,
    run_seed_sweep,
    spectrum_compare,
    wl_distinguish,
)
from graph_informer.src.logging import attach_file_handler, set_local_logger
from graph_informer.src.nn import grad_check
from graph_informer.src.settings import get_run_settings
from graph_informer.src.training import evaluate, load_dataset, masked_cross_entropy, train_toy

logger = set_local_logger(__name__)

DEFAULT_ISO_SETS = ["RegN6D3", "RegN8D3", "Q4-vs-Hoffman"]


def write_report(path, document: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
    logger.info(f"Wrote report {path}")


def load_graphs(args) -> list:
    """Graphs named on the command line: builtin sets, graph6 files or JSON documents."""
    graphs = []
    for path in getattr(args, "graph6", None) or []:
        graphs.extend(read_graph6_file(path))
    for path in getattr(args, "graph_json", None) or []:
        graphs.append(read_graph_json_file(path))
    for line in getattr(args, "graphs", None) or []:
        graphs.append(parse_graph6(line))
    return graphs


# Subcommands


def run_iso_test(args, settings: dict) -> int:
    route_config = RouteFeatureConfig.from_dict({**ISO_TEST_ROUTE_FEATURES, "histogram_k": args.k})
    score_maps = ["sigmoid", "softmax"] if args.score_map == "both" else [args.score_map]

    graph_sets = []
    if args.graph6:
        graph_sets.append((Path(args.graph6[0]).stem, load_graphs(args)))
    for name in args.set or ([] if args.graph6 else DEFAULT_ISO_SETS):
        graph_sets.append((name, builtin_graphs(name)))

    seed = settings["seed"] if args.seed is None else args.seed
    seeds = range(seed, seed + args.seeds)
    reports = []
    for name, graphs in graph_sets:
        for score_map in score_maps:
            config = iso_test_config(route_config, score_map=score_map)
            reports.extend(
                run_seed_sweep(
                    graphs,
                    seeds,
                    config=config,
                    workers=settings["workers"],
                    threshold=args.threshold,
                    norm=args.norm,
                    route_config=route_config,
                    set_name=name,
                )
            )

    print(format_separation_table(reports))
    report_path = args.report or Path(settings["report_dir"]) / "iso-test.json"
    write_report(
        report_path,
        {"route_features": route_config.to_dict(), "reports": [r.to_dict() for r in reports]},
    )
    return 0


def gradcheck_cases(seed: int) -> list:
    """Small graphs (n <= 5) with random node features."""
    rng = np.random.default_rng(seed)
    edge_lists = [
        (3, [(0, 1), (1, 2)]),
        (4, [(0, 1), (1, 2), (2, 3), (0, 3)]),
        (5, [(0, 1), (1, 2), (1, 3), (3, 4)]),
    ]
    graphs = [
        Graph.from_edges(n, edges, node_features=rng.normal(size=(n, GRADCHECK_MODEL["f_nodes"])))
        for n, edges in edge_lists
    ]
    return graphs


def run_gradcheck(args, settings: dict) -> int:
    seed = settings["seed"] if args.seed is None else args.seed
    route_config = RouteFeatureConfig.from_dict(GRADCHECK_ROUTE_FEATURES)
    graphs = gradcheck_cases(seed)
    batched = batch(graphs, [route_features(g, route_config) for g in graphs])
    rng = np.random.default_rng(seed)

    results = {}
    cases = [
        (head, score_map)
        for head in ("node_regression", "graph_classification")
        for score_map in ("softmax", "sigmoid")
    ]
    for head, score_map in cases:
        config = InformerConfig.from_dict(
            GRADCHECK_MODEL, f_route=route_config.f_route, head=head, score_map=score_map
        )
        model = InformerModel.initialize(config, seed=seed)
        if head == "node_regression":
            shape = (batched.B, batched.n_max, config.n_tasks)
            mask = np.broadcast_to(batched.real_node_mask()[..., None], shape)
        else:
            shape = (batched.B, config.n_tasks)
            mask = np.ones(shape, dtype=bool)
        targets = rng.integers(0, 2, size=shape)

        def loss_fn(model=model, targets=targets, mask=mask):
            return masked_cross_entropy(predict(batched, model), targets, mask)

        params = list(model.named_parameters().values())
        results[f"{head}/{score_map}"] = float(
            grad_check(
                loss_fn,
                params,
                max_coordinates=args.max_coordinates,
                rng=np.random.default_rng(seed),
            )
        )

    worst = max(results.values())
    for case, error in results.items():
        print(f"{case:<30} max relative error {error:.3e}")
    passed = bool(worst < GRADCHECK_TOLERANCE)
    print(f"gradcheck {'passed' if passed else 'FAILED'} (tolerance {GRADCHECK_TOLERANCE:g})")
    if args.report:
        write_report(args.report, {"seed": seed, "max_relative_error": results, "passed": passed})
    return 0 if passed else 1


def run_train_toy(args, settings: dict) -> int:
    seed = settings["seed"] if args.seed is None else args.seed
    run_name = f"toy-{args.task}-seed{seed}" + ("-ablated" if args.ablate_routes else "")
    checkpoint = args.checkpoint or Path(settings["checkpoint_dir"]) / f"{run_name}.json"
    Path(checkpoint).parent.mkdir(parents=True, exist_ok=True)

    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    model, result = train_toy(
        args.task,
        seed=seed,
        n_graphs=args.n_graphs,
        n_valid=args.n_valid,
        ablate_routes=args.ablate_routes,
        checkpoint_path=checkpoint,
        **overrides,
    )

    metric = "mae" if args.task == "node" else "auc"
    print(f"task        {args.task}")
    print(f"seed        {seed}")
    print(f"best epoch  {result.best_epoch}")
    print(f"valid {metric:<5} {result.best_metric:.4f}")
    print(f"checkpoint  {checkpoint}")

    report_path = args.report or Path(settings["report_dir"]) / f"train-{run_name}.json"
    write_report(
        report_path,
        {
            "config": model.config.to_dict(),
            "route_features": model.route_features,
            "seed": seed,
            "ablate_routes": args.ablate_routes,
            **result.to_dict(),
        },
    )
    return 0


def format_attention(entry: dict) -> str:
    labels = entry["node_labels"]
    width = max(6, *(len(label) for label in labels))
    lines = [f"layer {entry['layer']} head {entry['head']} sample {entry['sample']}"]
    lines.append(" " * width + " " + " ".join(label.rjust(width) for label in labels))
    for label, row in zip(labels, entry["matrix"]):
        lines.append(label.rjust(width) + " " + " ".join(f"{value:{width}.3f}" for value in row))
    return "\n".join(lines)


def run_attn_dump(args, settings: dict) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        route_config = RouteFeatureConfig.from_dict(model.route_features or TOY_ROUTE_FEATURES)
    else:
        seed = settings["seed"] if args.seed is None else args.seed
        route_config = RouteFeatureConfig.from_dict(TOY_ROUTE_FEATURES)
        model = InformerModel.initialize(
            InformerConfig.from_dict(TOY_MODEL, f_route=route_config.f_route), seed=seed
        )

    graphs = load_graphs(args)
    for name in args.set or []:
        graphs.extend(builtin_graphs(name))
    if not graphs:
        raise ConfigurationError("attn-dump needs a graph from --graph6, --graph-json or --set")
    f_nodes = model.config.f_nodes
    graphs = [
        g if g.node_features is not None
        else Graph(g.n, g.adjacency, node_features=np.ones((g.n, f_nodes)), name=g.name)
        for g in graphs
    ]

    routes = [route_features(g, route_config) for g in graphs]
    batched = batch(graphs, routes, pool=model.config.pool)
    entries = attention_dump(batched, model)
    if args.layer is not None:
        entries = [entry for entry in entries if entry["layer"] == args.layer]
    print("\n\n".join(format_attention(entry) for entry in entries))

    output = args.output or Path(settings["report_dir"]) / "attn-dump.json"
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", encoding="utf-8") as fh:
        json.dump(entries, fh)
    logger.info(f"Wrote {len(entries)} attention matrices to {output}")
    return 0


def run_wl_compare(args, settings: dict) -> int:
    graphs = load_graphs(args)
    for name in args.set or []:
        graphs.extend(builtin_graphs(name))
    if len(graphs) < 2:
        raise ConfigurationError("wl-compare needs at least two graphs")

    rows = []
    for i, j in combinations(range(len(graphs)), 2):
        label_i = graphs[i].name or str(i)
        label_j = graphs[j].name or str(j)
        rows.append(
            {
                "first": label_i,
                "second": label_j,
                "wl": wl_distinguish(graphs[i], graphs[j]),
                "spectrum": spectrum_compare(graphs[i], graphs[j]),
            }
        )

    width = max(len(row["first"]) + len(row["second"]) for row in rows) + 5
    print(f"{'pair':<{width}} {'WL':<18} spectrum")
    for row in rows:
        pair = f"{row['first']} vs {row['second']}"
        print(f"{pair:<{width}} {row['wl']:<18} {row['spectrum']}")

    if args.report:
        write_report(args.report, {"pairs": rows})
    return 0


def run_eval(args, settings: dict) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.route_features is None:
        raise CheckpointError(f"Checkpoint {args.checkpoint} does not record its route features")
    route_config = RouteFeatureConfig.from_dict(model.route_features)
    dataset = load_dataset(args.dataset)

    metrics = evaluate(model, dataset, route_config)
    for name, value in metrics.items():
        print(f"{name:<16} {value}")
    report_path = args.report or Path(settings["report_dir"]) / "eval.json"
    report = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset), **metrics}
    write_report(report_path, report)
    return 0


# Command line


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graph-informer",
        description="Graph Informer: route-based attention for graphs.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_graph_inputs(sub):
        sub.add_argument("--graph6", action="append", help="graph6 file (one graph per line)")
        sub.add_argument("--graph-json", action="append", help="JSON graph document")
        sub.add_argument(
            "--set", action="append", choices=BUILTIN_SET_NAMES, help="builtin graph set"
        )

    iso = subparsers.add_parser("iso-test", help="separate graph sets with an untrained network")
    add_graph_inputs(iso)
    iso.add_argument("--seed", type=int, default=None)
    iso.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to sweep")
    iso.add_argument("--threshold", type=float, default=SEPARATION_THRESHOLD)
    iso.add_argument("--score-map", choices=["sigmoid", "softmax", "both"], default="sigmoid")
    iso.add_argument("--k", type=int, default=ISO_TEST_ROUTE_FEATURES["histogram_k"])
    iso.add_argument("--norm", choices=["max", "l2"], default="max")
    iso.add_argument("--report", default=None)
    iso.set_defaults(handler=run_iso_test)

    gradcheck = subparsers.add_parser(
        "gradcheck", help="compare model gradients with finite differences"
    )
    gradcheck.add_argument("--seed", type=int, default=None)
    gradcheck.add_argument("--max-coordinates", type=int, default=20)
    gradcheck.add_argument("--report", default=None)
    gradcheck.set_defaults(handler=run_gradcheck)

    toy = subparsers.add_parser("train-toy", help="train on a synthetic task")
    toy.add_argument("task", choices=["node", "graph"])
    toy.add_argument("--seed", type=int, default=None)
    toy.add_argument("--epochs", type=int, default=None)
    toy.add_argument("--n-graphs", type=int, default=TOY_DATA["train_graphs"])
    toy.add_argument("--n-valid", type=int, default=TOY_DATA["valid_graphs"])
    toy.add_argument("--ablate-routes", action="store_true", help="zero every route feature")
    toy.add_argument("--checkpoint", default=None)
    toy.add_argument("--report", default=None)
    toy.set_defaults(handler=run_train_toy)

    dump = subparsers.add_parser("attn-dump", help="print per-head attention matrices")
    add_graph_inputs(dump)
    dump.add_argument("--checkpoint", default=None)
    dump.add_argument("--seed", type=int, default=None)
    dump.add_argument("--layer", type=int, default=None)
    dump.add_argument("--output", default=None)
    dump.set_defaults(handler=run_attn_dump)

    wl = subparsers.add_parser("wl-compare", help="WL and spectrum comparison of graph pairs")
    add_graph_inputs(wl)
    wl.add_argument("graphs", nargs="*", help="graph6 strings")
    wl.add_argument("--report", default=None)
    wl.set_defaults(handler=run_wl_compare)

    ev = subparsers.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--report", default=None)
    ev.set_defaults(handler=run_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    try:
        settings = get_run_settings()
        if settings["log_file"]:
            attach_file_handler(settings["log_file"])
        logger.debug(f"Running {args.command}")
        return args.handler(args, settings)

    except ConfigurationError as e:
        logger.critical(f"CONFIGURATION ERROR: {e}")
        print(f"graph-informer: {e}", file=sys.stderr)
        return 2
    except GraphFormatError as e:
        logger.critical(f"GRAPH FORMAT ERROR: {e}")
        print(f"graph-informer: {e}", file=sys.stderr)
        return 1
    except CheckpointError as e:
        logger.critical(f"CHECKPOINT ERROR: {e}")
        print(f"graph-informer: {e}", file=sys.stderr)
        return 1
    except TrainingError as e:
        logger.critical(f"TRAINING ERROR: {e}")
        print(f"graph-informer: {e}", file=sys.stderr)
        return 1
    except GraphInformerError as e:
        logger.critical(f"GRAPH INFORMER ERROR: {e}")
        print(f"graph-informer: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.critical(f"IO ERROR: {e}")
        print(f"graph-informer: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        logger.info("Keyboard Exit")
        return 130


if __name__ == "__main__":
    sys.exit(main())
