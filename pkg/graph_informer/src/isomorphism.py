"""
Isomorphism harness: 1-dimensional Weisfeiler-Lehman refinement, the builtin
regular graph families and separation of graph sets by embeddings of an
untrained Graph Informer.
"""

import concurrent.futures
from dataclasses import dataclass, field
from itertools import combinations

import networkx as nx
import numpy as np
from nltk import FreqDist

from .constants import (
    BUILTIN_SET_NAMES,
    ISO_TEST_MODEL,
    ISO_TEST_ROUTE_FEATURES,
    SEPARATION_THRESHOLD,
)
from .errors import ConfigurationError
from .graphs import Graph, RouteFeatureConfig, batch, route_features
from .informer import InformerConfig, InformerModel, forward, sum_readout
from .logging import set_local_logger

logger = set_local_logger(__name__)

NORMS = ("max", "l2")


# Weisfeiler-Lehman


@dataclass
class WLColoring:
    colors: list
    histograms: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.histograms) - 1

    @property
    def n_classes(self) -> int:
        return len(set(self.colors))

    def class_sizes(self, iteration: int = -1) -> list:
        return sorted(self.histograms[iteration].values())

    def classes(self) -> list:
        """Final partition as sorted lists of node ids."""
        groups = {}
        for node, color in enumerate(self.colors):
            groups.setdefault(color, []).append(node)
        return sorted(groups.values())


def wl_refine(
    g: Graph,
    max_iter: int | None = None,
    palette: dict | None = None,
    stop_when_stable: bool = True,
) -> WLColoring:
    """
    Classic color refinement from a uniform start. A node's new color is the
    palette id of (own color, sorted neighbor colors); a shared palette keeps
    ids comparable between graphs refined side by side.
    """
    palette = {} if palette is None else palette
    max_iter = g.n if max_iter is None else max_iter
    neighbors = [np.flatnonzero(row).tolist() for row in g.adjacency]

    colors = [0] * g.n
    histograms = [FreqDist(colors)]
    for _ in range(max_iter):
        signatures = [
            (colors[v], tuple(sorted(colors[u] for u in neighbors[v]))) for v in range(g.n)
        ]
        refined = [palette.setdefault(signature, len(palette) + 1) for signature in signatures]
        stable = len(set(refined)) == len(set(colors))
        colors = refined
        histograms.append(FreqDist(colors))
        if stable and stop_when_stable:
            break

    return WLColoring(colors=colors, histograms=histograms)


def wl_distinguish(g1: Graph, g2: Graph) -> str:
    if g1.n != g2.n:
        return "separated"
    palette = {}
    rounds = max(g1.n, 1)
    first = wl_refine(g1, rounds, palette, stop_when_stable=False)
    second = wl_refine(g2, rounds, palette, stop_when_stable=False)
    if first.histograms != second.histograms:
        return "separated"
    return "indistinguishable"


# Builtin graph families


def _cube(dimension: int, name: str) -> Graph:
    n = 2**dimension
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if bin(i ^ j).count("1") == 1]
    return Graph.from_edges(n, edges, name=name)


def _from_adjacency_lists(n: int, lists: dict, name: str) -> Graph:
    return Graph.from_edges(n, [(u, v) for u, targets in lists.items() for v in targets], name=name)


def _regular_6_3() -> list:
    k33 = [(i, j) for i in range(3) for j in range(3, 6)]
    prism = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (0, 3), (1, 4), (2, 5)]
    return [
        Graph.from_edges(6, k33, name="RegN6D3-K33"),
        Graph.from_edges(6, prism, name="RegN6D3-prism"),
    ]


def _regular_8_3() -> list:
    cycle = [(i, (i + 1) % 8) for i in range(8)]
    wagner = cycle + [(i, i + 4) for i in range(4)]
    two_diamonds = [
        (0, 1), (0, 2), (1, 2), (1, 3), (2, 3),
        (4, 5), (4, 6), (5, 6), (5, 7), (6, 7),
        (0, 4), (3, 7),
    ]  # fmt: skip
    two_triangles = cycle + [(0, 4), (1, 3), (2, 6), (5, 7)]
    one_triangle = [
        (0, 1), (1, 2), (0, 2),
        (0, 3), (1, 4), (2, 5),
        (6, 3), (6, 4), (6, 5),
        (7, 3), (7, 4), (7, 5),
    ]  # fmt: skip
    return [
        _cube(3, "RegN8D3-cube"),
        Graph.from_edges(8, wagner, name="RegN8D3-wagner"),
        Graph.from_edges(8, two_diamonds, name="RegN8D3-two-diamonds"),
        Graph.from_edges(8, two_triangles, name="RegN8D3-two-triangles"),
        Graph.from_edges(8, one_triangle, name="RegN8D3-one-triangle"),
    ]


# 4-regular bipartite, cospectral with Q4 and not isomorphic to it.
HOFFMAN_ADJACENCY = {
    0: [1, 7, 8, 13],
    1: [2, 9, 14],
    2: [3, 8, 10],
    3: [4, 9, 15],
    4: [5, 10, 11],
    5: [6, 12, 14],
    6: [7, 11, 13],
    7: [12, 15],
    8: [12, 14],
    9: [11, 13],
    10: [12, 15],
    11: [14],
    13: [15],
}


def builtin_graphs(name: str) -> list:
    if name == "RegN6D3":
        return _regular_6_3()
    if name == "RegN8D3":
        return _regular_8_3()
    if name == "Q4":
        return [_cube(4, "Q4")]
    if name == "Hoffman":
        return [_from_adjacency_lists(16, HOFFMAN_ADJACENCY, "Hoffman")]
    if name == "Q4-vs-Hoffman":
        return builtin_graphs("Q4") + builtin_graphs("Hoffman")
    raise ConfigurationError(
        f"Unknown builtin graph set {name!r}, expected one of {BUILTIN_SET_NAMES}"
    )


def spectrum_compare(g1: Graph, g2: Graph, tolerance: float = 1e-8) -> str:
    if g1.n != g2.n:
        return "different"
    first = np.sort(np.linalg.eigvalsh(g1.adjacency.astype(np.float64)))
    second = np.sort(np.linalg.eigvalsh(g2.adjacency.astype(np.float64)))
    if np.allclose(first, second, rtol=0.0, atol=tolerance):
        return "cospectral"
    return "different"


# Separation by untrained network embeddings


@dataclass
class SeparationReport:
    set_name: str
    graphs_total: int
    graphs_separated: int
    pairs_tested: int
    pairs_separated_wl: int
    pairs_separated_gi: int
    threshold: float
    seed: int
    score_map: str
    norm: str = "max"
    min_pair_distance: float | None = None
    separated_pairs: list = field(default_factory=list)
    # size of a group of mutually unseparated graphs -> number of such groups
    class_size_histogram: dict = field(default_factory=dict)

    @property
    def all_separated(self) -> bool:
        return self.graphs_separated == self.graphs_total

    def to_dict(self) -> dict:
        return {
            "set_name": self.set_name,
            "graphs_total": self.graphs_total,
            "graphs_separated": self.graphs_separated,
            "pairs_tested": self.pairs_tested,
            "pairs_separated_wl": self.pairs_separated_wl,
            "pairs_separated_gi": self.pairs_separated_gi,
            "threshold": self.threshold,
            "seed": self.seed,
            "score_map": self.score_map,
            "norm": self.norm,
            "min_pair_distance": self.min_pair_distance,
            "separated_pairs": [list(pair) for pair in self.separated_pairs],
            "class_size_histogram": {
                str(size): count for size, count in sorted(self.class_size_histogram.items())
            },
        }


def iso_test_config(
    route_config: RouteFeatureConfig, score_map: str | None = None, **overrides
) -> InformerConfig:
    settings = {**ISO_TEST_MODEL, **overrides, "f_route": route_config.f_route}
    if score_map is not None:
        settings["score_map"] = score_map
    return InformerConfig.from_dict(settings)


def graph_embeddings(
    graphs: list, config: InformerConfig, route_config: RouteFeatureConfig, seed: int
) -> np.ndarray:
    """Sum-readout embeddings (one row per graph) of a freshly initialized network."""
    if config.f_route != route_config.f_route:
        raise ConfigurationError(
            f"model expects {config.f_route} route features, "
            f"route config yields {route_config.f_route}"
        )
    constant_input = [
        Graph(g.n, g.adjacency, node_features=np.ones((g.n, config.f_nodes)), name=g.name)
        for g in graphs
    ]
    routes = [route_features(g, route_config) for g in constant_input]
    model = InformerModel.initialize(config, seed=seed)
    batched = batch(constant_input, routes, pool=False)
    return sum_readout(forward(batched, model), batched).data


def _distance(a: np.ndarray, b: np.ndarray, norm: str) -> float:
    if norm == "max":
        return float(np.max(np.abs(a - b)))
    return float(np.linalg.norm(a - b))


def gi_separate(
    graphs: list,
    config: InformerConfig | None = None,
    seed: int = 0,
    threshold: float = SEPARATION_THRESHOLD,
    norm: str = "max",
    route_config: RouteFeatureConfig | None = None,
    set_name: str = "custom",
) -> SeparationReport:
    if norm not in NORMS:
        raise ConfigurationError(f"norm must be one of {NORMS}, got {norm!r}")
    if len(graphs) < 2:
        raise ConfigurationError("separation needs at least two graphs")
    route_config = route_config or RouteFeatureConfig.from_dict(ISO_TEST_ROUTE_FEATURES)
    config = config or iso_test_config(route_config)

    embeddings = graph_embeddings(graphs, config, route_config, seed)

    n_graphs = len(graphs)
    separated_from = [set() for _ in range(n_graphs)]
    separated_pairs = []
    pairs_wl = 0
    distances = []
    for i, j in combinations(range(n_graphs), 2):
        distance = _distance(embeddings[i], embeddings[j], norm)
        distances.append(distance)
        if distance > threshold:
            separated_pairs.append((i, j))
            separated_from[i].add(j)
            separated_from[j].add(i)
        if wl_distinguish(graphs[i], graphs[j]) == "separated":
            pairs_wl += 1

    unique = sum(1 for i in range(n_graphs) if len(separated_from[i]) == n_graphs - 1)
    unseparated = nx.complete_graph(n_graphs)
    unseparated.remove_edges_from(separated_pairs)
    class_sizes = FreqDist(len(group) for group in nx.connected_components(unseparated))
    report = SeparationReport(
        set_name=set_name,
        graphs_total=n_graphs,
        graphs_separated=unique,
        pairs_tested=len(distances),
        pairs_separated_wl=pairs_wl,
        pairs_separated_gi=len(separated_pairs),
        threshold=threshold,
        seed=seed,
        score_map=config.score_map,
        norm=norm,
        min_pair_distance=min(distances),
        separated_pairs=separated_pairs,
        class_size_histogram=dict(class_sizes),
    )
    logger.debug(
        f"{set_name} seed {seed}: {unique}/{n_graphs} graphs separated, "
        f"smallest pair distance {report.min_pair_distance:.3e}"
    )
    return report


def run_seed_sweep(
    graphs: list,
    seeds,
    config: InformerConfig | None = None,
    workers: int = 1,
    **separate_kwargs,
) -> list:
    """One SeparationReport per seed, in seed order."""
    seeds = list(seeds)

    def separate(seed):
        return gi_separate(graphs, config=config, seed=seed, **separate_kwargs)

    if workers <= 1:
        reports = [separate(seed) for seed in seeds]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            reports = list(executor.map(separate, seeds))

    failing = [report.seed for report in reports if not report.all_separated]
    if failing:
        logger.warning(f"Seeds leaving graphs unseparated: {failing}")
    return reports


def format_separation_table(reports: list) -> str:
    """Text table with one row per report, e.g. `RegN8D3  5 / 5  100%`."""
    header = ("Graph set", "Score map", "Seed", "WL pairs", "Separated / Total", "%")
    rows = []
    for report in reports:
        total = report.graphs_total
        rows.append(
            (
                report.set_name,
                report.score_map,
                str(report.seed),
                f"{report.pairs_separated_wl} / {report.pairs_tested}",
                f"{report.graphs_separated} / {total}",
                f"{100.0 * report.graphs_separated / total:.0f}%",
            )
        )

    widths = [max(len(row[c]) for row in [header, *rows]) for c in range(len(header))]
    lines = [
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in [header, *rows]
    ]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)
