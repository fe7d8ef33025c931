import json
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .constants import MASK_VALUE, UNREACHABLE
from .errors import ConfigurationError, DimensionError, GraphFormatError
from .logging import set_local_logger

logger = set_local_logger(__name__)

GRAPH6_HEADER = ">>graph6<<"
GRAPH6_MAX_NODES = 258047


@dataclass
class Graph:
    n: int
    adjacency: np.ndarray
    node_features: np.ndarray | None = None
    name: str | None = None

    def __post_init__(self):
        adjacency = np.asarray(self.adjacency)
        if adjacency.shape != (self.n, self.n):
            raise GraphFormatError(
                f"adjacency shape {adjacency.shape} does not match n={self.n}"
            )
        if not np.isin(adjacency, (0, 1)).all():
            raise GraphFormatError("adjacency entries must be 0 or 1")
        if not np.array_equal(adjacency, adjacency.T):
            raise GraphFormatError("adjacency must be symmetric (undirected graph)")
        if np.any(np.diag(adjacency)):
            raise GraphFormatError("adjacency must have a zero diagonal (no self-loops)")
        self.adjacency = adjacency.astype(np.int64)

        if self.node_features is not None:
            features = np.asarray(self.node_features, dtype=np.float64)
            if features.ndim != 2 or features.shape[0] != self.n:
                raise GraphFormatError(
                    f"node_features shape {features.shape} does not have {self.n} rows"
                )
            self.node_features = features

    @classmethod
    def from_edges(cls, n: int, edges, node_features=None, name=None) -> "Graph":
        adjacency = np.zeros((n, n), dtype=np.int64)
        for a, b in edges:
            adjacency[a, b] = 1
            adjacency[b, a] = 1
        return cls(n=n, adjacency=adjacency, node_features=node_features, name=name)

    def edges(self) -> list:
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(a), int(b)) for a, b in zip(rows, cols)]

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def permute(self, perm) -> "Graph":
        """Relabel node a as perm[a]."""
        perm = np.asarray(perm)
        if sorted(perm.tolist()) != list(range(self.n)):
            raise ConfigurationError(f"{perm.tolist()} is not a permutation of {self.n} nodes")
        inverse = np.argsort(perm)
        features = None if self.node_features is None else self.node_features[inverse]
        return Graph(
            n=self.n,
            adjacency=self.adjacency[np.ix_(inverse, inverse)],
            node_features=features,
            name=self.name,
        )

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        graph.add_edges_from(self.edges())
        return graph


@dataclass
class RouteTensor:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != data.shape[1]:
            raise DimensionError(f"route tensor must be n x n x f, got {data.shape}")
        self.data = data

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def f(self) -> int:
        return self.data.shape[2]

    def permute(self, perm) -> "RouteTensor":
        inverse = np.argsort(np.asarray(perm))
        return RouteTensor(self.data[np.ix_(inverse, inverse)])


# graph6


def _graph6_bits(payload: bytes) -> list:
    bits = []
    for byte in payload:
        value = byte - 63
        bits.extend((value >> shift) & 1 for shift in range(5, -1, -1))
    return bits


def parse_graph6(line: str) -> Graph:
    text = line.strip()
    base = 0
    if text.startswith(GRAPH6_HEADER):
        text = text[len(GRAPH6_HEADER) :]
        base = len(GRAPH6_HEADER)

    try:
        data = text.encode("ascii")
    except UnicodeEncodeError as e:
        raise GraphFormatError("graph6 line contains non-ASCII data", base + e.start) from None
    if not data:
        raise GraphFormatError("empty graph6 line", base)
    for position, byte in enumerate(data):
        if not 63 <= byte <= 126:
            raise GraphFormatError(f"invalid graph6 byte {byte!r}", base + position)

    if data[0] == 126:
        if len(data) > 1 and data[1] == 126:
            raise GraphFormatError("8-byte graph6 size form is not supported", base)
        if len(data) < 4:
            raise GraphFormatError("truncated graph6 size field", base + len(data))
        n = 0
        for byte in data[1:4]:
            n = (n << 6) | (byte - 63)
        start = 4
    else:
        n = data[0] - 63
        start = 1

    n_bits = n * (n - 1) // 2
    n_bytes = (n_bits + 5) // 6
    payload = data[start:]
    if len(payload) < n_bytes:
        raise GraphFormatError(
            f"truncated graph6 adjacency: expected {n_bytes} bytes, found {len(payload)}",
            base + len(data),
        )
    if len(payload) > n_bytes:
        raise GraphFormatError("trailing bytes after graph6 adjacency", base + start + n_bytes)

    bits = _graph6_bits(payload)
    if any(bits[n_bits:]):
        raise GraphFormatError("non-zero graph6 padding bits", base + len(data) - 1)

    adjacency = np.zeros((n, n), dtype=np.int64)
    k = 0
    for j in range(1, n):
        for i in range(j):
            if bits[k]:
                adjacency[i, j] = 1
                adjacency[j, i] = 1
            k += 1

    return Graph(n=n, adjacency=adjacency)


def encode_graph6(g: Graph) -> str:
    if g.n > GRAPH6_MAX_NODES:
        raise GraphFormatError(f"graph6 encoding supports n <= {GRAPH6_MAX_NODES}")
    if g.n <= 62:
        out = [g.n + 63]
    else:
        out = [126] + [((g.n >> shift) & 63) + 63 for shift in (12, 6, 0)]

    bits = [int(g.adjacency[i, j]) for j in range(1, g.n) for i in range(j)]
    bits.extend([0] * (-len(bits) % 6))
    for start in range(0, len(bits), 6):
        value = 0
        for bit in bits[start : start + 6]:
            value = (value << 1) | bit
        out.append(value + 63)

    return bytes(out).decode("ascii")


def read_graph6_file(path) -> list:
    path = Path(path)
    graphs = []
    try:
        lines = path.read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        logger.warning(f"Error reading graph6 file {path}: {e}")
        raise GraphFormatError(f"cannot read graph6 file {path}: {e}") from e

    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            graph = parse_graph6(line)
        except GraphFormatError as e:
            raise GraphFormatError(f"{path}:{line_number}: {e}") from e
        graph.name = f"{path.stem}-G{len(graphs) + 1}"
        graphs.append(graph)

    logger.debug(f"Read {len(graphs)} graphs from {path}")
    return graphs


# JSON graph documents


def load_graph_json(doc) -> Graph:
    """
    Graph document:
        {
            "name": "<optional identifier>",
            "n": <node count>,
            "edges": [[<a>, <b>], ...],
            "node_features": [[<float>, ...], ...]   (optional, one row per node)
        }
    An "adjacency" matrix may replace "edges".
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise GraphFormatError(f"invalid JSON graph document: {e}") from e
    if not isinstance(doc, dict) or "n" not in doc:
        raise GraphFormatError("graph document must be an object with an 'n' field")

    n = doc["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 0:
        raise GraphFormatError(f"'n' must be a non-negative integer, got {n!r}")

    if "adjacency" in doc:
        adjacency = np.asarray(doc["adjacency"])
        if adjacency.shape != (n, n):
            raise GraphFormatError(f"adjacency shape {adjacency.shape} inconsistent with n={n}")
        if not np.array_equal(adjacency, adjacency.T):
            raise GraphFormatError("adjacency matrix is not symmetric")
    else:
        adjacency = np.zeros((n, n), dtype=np.int64)
        seen = set()
        for edge in doc.get("edges", []):
            if len(edge) != 2:
                raise GraphFormatError(f"edge {edge!r} must have two endpoints")
            a, b = int(edge[0]), int(edge[1])
            if not (0 <= a < n and 0 <= b < n):
                raise GraphFormatError(f"edge {edge!r} references a node outside 0..{n - 1}")
            if a == b:
                raise GraphFormatError(f"self-loop on node {a}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise GraphFormatError(f"duplicate edge {key}")
            seen.add(key)
            adjacency[a, b] = 1
            adjacency[b, a] = 1

    features = doc.get("node_features")
    if features is not None:
        features = np.asarray(features, dtype=np.float64)

    return Graph(n=n, adjacency=adjacency, node_features=features, name=doc.get("name"))


def graph_to_json(g: Graph) -> dict:
    doc = {"name": g.name, "n": g.n, "edges": [list(edge) for edge in g.edges()]}
    if g.node_features is not None:
        doc["node_features"] = g.node_features.tolist()
    return doc


def read_graph_json_file(path) -> Graph:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return load_graph_json(fh.read())
    except OSError as e:
        logger.warning(f"Error reading graph document {path}: {e}")
        raise GraphFormatError(f"cannot read graph document {path}: {e}") from e


# Route features


def route_histogram(g: Graph, k: int) -> RouteTensor:
    """Stack of A, A^2, ..., A^k: walk counts of each length per node pair."""
    if k < 1:
        raise ConfigurationError(f"route histogram length k must be >= 1, got {k}")
    adjacency = g.adjacency.astype(np.float64)
    power = np.eye(g.n)
    layers = []
    for _ in range(k):
        power = power @ adjacency
        layers.append(power)
    return RouteTensor(np.stack(layers, axis=-1).reshape(g.n, g.n, k))


def shortest_distances(g: Graph) -> np.ndarray:
    distances = np.full((g.n, g.n), UNREACHABLE, dtype=np.int64)
    for source, lengths in nx.all_pairs_shortest_path_length(g.to_networkx()):
        for target, length in lengths.items():
            distances[source, target] = length
    return distances


def _parse_bins(bins) -> tuple:
    ranges = []
    unreachable_slot = None
    for slot, entry in enumerate(bins):
        if entry == "unreachable":
            if unreachable_slot is not None:
                raise ConfigurationError("more than one unreachable distance bin")
            unreachable_slot = slot
            continue
        entry = [entry] if isinstance(entry, int) else list(entry)
        if len(entry) == 1:
            entry = [entry[0], entry[0]]
        if len(entry) != 2:
            raise ConfigurationError(f"distance bin {entry!r} must be [lo] or [lo, hi]")
        lo, hi = entry
        if lo < 0 or (hi is not None and hi < lo):
            raise ConfigurationError(f"distance bin {entry!r} is empty or negative")
        ranges.append((lo, hi, slot))

    if not ranges:
        raise ConfigurationError("distance bins must cover [0, inf)")
    ranges.sort(key=lambda r: r[0])
    if ranges[0][0] != 0:
        raise ConfigurationError("distance bins must start at 0")
    for (lo, hi, _), (next_lo, _, _) in zip(ranges, ranges[1:]):
        if hi is None or next_lo <= hi:
            raise ConfigurationError(f"overlapping distance bins at distance {next_lo}")
        if next_lo != hi + 1:
            raise ConfigurationError(f"distance bins leave a gap after {hi}")
    if ranges[-1][1] is not None:
        raise ConfigurationError("the last distance bin must be open-ended ([lo, null])")

    return ranges, unreachable_slot


def distance_bin_features(g: Graph, bins, distances=None) -> RouteTensor:
    """One-hot shortest-distance bins per node pair, in the order the bins are given."""
    ranges, unreachable_slot = _parse_bins(bins)
    if distances is None:
        distances = shortest_distances(g)

    features = np.zeros((g.n, g.n, len(bins)))
    unreachable = distances == UNREACHABLE
    if unreachable.any():
        if unreachable_slot is None:
            raise ConfigurationError(
                "graph has unreachable node pairs but no 'unreachable' distance bin"
            )
        features[unreachable, unreachable_slot] = 1.0
    for lo, hi, slot in ranges:
        inside = ~unreachable & (distances >= lo)
        if hi is not None:
            inside &= distances <= hi
        features[inside, slot] = 1.0

    return RouteTensor(features)


@dataclass
class RouteFeatureConfig:
    histogram_k: int | None = 4
    distance_bins: list | None = None
    zero_routes: bool = False

    def __post_init__(self):
        if self.histogram_k is None and not self.distance_bins:
            raise ConfigurationError("route features need a histogram length or distance bins")
        if self.histogram_k is not None and self.histogram_k < 1:
            raise ConfigurationError(f"histogram_k must be >= 1, got {self.histogram_k}")
        if self.distance_bins:
            _parse_bins(self.distance_bins)

    @property
    def f_route(self) -> int:
        return (self.histogram_k or 0) + len(self.distance_bins or [])

    @classmethod
    def from_dict(cls, settings: dict) -> "RouteFeatureConfig":
        return cls(
            histogram_k=settings.get("histogram_k", 4),
            distance_bins=settings.get("distance_bins"),
            zero_routes=settings.get("zero_routes", False),
        )

    def to_dict(self) -> dict:
        return {
            "histogram_k": self.histogram_k,
            "distance_bins": self.distance_bins,
            "zero_routes": self.zero_routes,
        }


def route_features(g: Graph, config: RouteFeatureConfig) -> RouteTensor:
    parts = []
    if config.histogram_k is not None:
        parts.append(route_histogram(g, config.histogram_k).data)
    if config.distance_bins:
        parts.append(distance_bin_features(g, config.distance_bins).data)
    data = np.concatenate(parts, axis=-1)
    if config.zero_routes:
        data = np.zeros_like(data)
    return RouteTensor(data)


# Masks and batching


def attention_ball_mask(distances, radius: int | None, r_min: int = 0) -> np.ndarray:
    """
    Additive mask: 0 where r_min <= dist <= radius, MASK_VALUE elsewhere.
    radius=None leaves every pair unmasked (r_min=0) - unreachable pairs included.
    A finite radius always masks unreachable pairs.
    """
    distances = np.asarray(distances)
    if r_min < 0:
        raise ConfigurationError(f"attention shell r_min must be >= 0, got {r_min}")
    if radius is None:
        if r_min == 0:
            return np.zeros(distances.shape)
        inside = (distances != UNREACHABLE) & (distances >= r_min)
        return np.where(inside, 0.0, MASK_VALUE)
    if radius < 0:
        raise ConfigurationError(f"attention radius must be >= 0, got {radius}")
    if r_min > radius:
        raise ConfigurationError(f"attention shell r_min={r_min} exceeds radius={radius}")

    inside = (distances != UNREACHABLE) & (distances <= radius) & (distances >= r_min)
    return np.where(inside, 0.0, MASK_VALUE)


@dataclass
class BatchedGraphs:
    node_features: np.ndarray
    P: np.ndarray
    M_node: np.ndarray
    M_route: np.ndarray
    distances: np.ndarray
    node_counts: np.ndarray
    pool: bool
    names: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return self.P.shape[0]

    @property
    def n_max(self) -> int:
        return self.P.shape[1]

    @property
    def f_route(self) -> int:
        return self.P.shape[3]

    @property
    def pool_index(self) -> int | None:
        return self.n_max - 1 if self.pool else None

    def real_node_mask(self) -> np.ndarray:
        """Boolean (B, N_max): True on real graph nodes, False on padding and pool."""
        slots = np.arange(self.n_max)[None, :]
        return slots < self.node_counts[:, None]

    def pool_indicator(self) -> np.ndarray:
        indicator = np.zeros((self.B, self.n_max))
        if self.pool:
            indicator[:, self.pool_index] = 1.0
        return indicator

    def route_masks(self, radii: list, r_min: int = 0) -> np.ndarray:
        """Per-head additive route masks, shape (B, heads, N_max, N_max)."""
        masks = []
        for radius in radii:
            ball = attention_ball_mask(self.distances, radius, r_min)
            if self.pool:
                ball[:, self.pool_index, :] = 0.0
                ball[:, :, self.pool_index] = 0.0
            masks.append(ball + self.M_route)
        return np.stack(masks, axis=1)


def batch(graphs: list, route_tensors: list, pool: bool = True) -> BatchedGraphs:
    """
    Zero-pad and stack graphs. With pool=True every sample gets one extra slot
    at index N_max - 1 that is attendable from (and can attend to) every real
    node and carries all-zero route features.
    """
    if not graphs:
        raise DimensionError("cannot batch an empty list of graphs")
    if len(graphs) != len(route_tensors):
        raise DimensionError(
            f"{len(graphs)} graphs but {len(route_tensors)} route tensors"
        )

    f_route = route_tensors[0].f
    feature_rows = []
    for g, route in zip(graphs, route_tensors):
        if route.f != f_route:
            raise DimensionError(
                f"route feature dimension mismatch: {route.f} vs {f_route}"
            )
        if route.n != g.n:
            raise DimensionError(f"route tensor covers {route.n} nodes, graph has {g.n}")
        features = g.node_features if g.node_features is not None else np.ones((g.n, 1))
        feature_rows.append(features)
    f_nodes = feature_rows[0].shape[1]
    if any(features.shape[1] != f_nodes for features in feature_rows):
        raise DimensionError("node feature dimension differs between graphs")

    counts = np.array([g.n for g in graphs], dtype=np.int64)
    n_max = int(counts.max()) + (1 if pool else 0)
    b = len(graphs)

    node_features = np.zeros((b, n_max, f_nodes))
    P = np.zeros((b, n_max, n_max, f_route))
    M_node = np.full((b, n_max), MASK_VALUE)
    distances = np.full((b, n_max, n_max), UNREACHABLE, dtype=np.int64)

    for i, (g, route, features) in enumerate(zip(graphs, route_tensors, feature_rows)):
        n = g.n
        node_features[i, :n] = features
        P[i, :n, :n] = route.data
        M_node[i, :n] = 0.0
        distances[i, :n, :n] = shortest_distances(g)
    if pool:
        M_node[:, n_max - 1] = 0.0

    live = M_node == 0.0
    M_route = np.where(live[:, :, None] & live[:, None, :], 0.0, MASK_VALUE)

    return BatchedGraphs(
        node_features=node_features,
        P=P,
        M_node=M_node,
        M_route=M_route,
        distances=distances,
        node_counts=counts,
        pool=pool,
        names=[g.name for g in graphs],
    )
