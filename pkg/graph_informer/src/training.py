"""
Masked losses, metrics, datasets and the training loop.

Targets are stored with a boolean label mask of the same shape; positions with
a false mask never reach a loss value or a gradient.
"""

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.stats import rankdata

from .constants import TOY_DATA, TOY_MODEL, TOY_ROUTE_FEATURES, TRAIN_SCHEDULE
from .errors import ConfigurationError, GraphFormatError, LossError, NonFiniteError, TrainingError
from .graphs import (
    BatchedGraphs,
    Graph,
    RouteFeatureConfig,
    batch,
    graph_to_json,
    load_graph_json,
    route_features,
    shortest_distances,
)
from .informer import InformerConfig, InformerModel, predict, save_checkpoint
from .logging import set_local_logger
from .nn import Adam
from .tensor import Tensor, as_tensor, softplus, tensor_abs, tensor_sum

logger = set_local_logger(__name__)

TASKS = ("node", "graph")
METRICS = ("mae", "auc")


# Losses and metrics


def _loss_weights(pred: Tensor, target, mask) -> tuple:
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (pred.shape == target.shape == mask.shape):
        raise LossError(
            f"prediction {pred.shape}, target {target.shape} and mask {mask.shape} differ in shape"
        )
    count = int(mask.sum())
    if count == 0:
        raise LossError("label mask selects no entries; there is no supervised signal")
    clean_target = np.where(mask, target, 0.0)
    return clean_target, mask.astype(np.float64) / count


def masked_mae(pred, target, mask) -> Tensor:
    pred = as_tensor(pred)
    clean_target, weights = _loss_weights(pred, target, mask)
    return tensor_sum(tensor_abs(pred - clean_target) * weights)


def masked_cross_entropy(logits, target, mask) -> Tensor:
    """Binary cross-entropy with logits, softplus(x) - x * t, over observed entries."""
    logits = as_tensor(logits)
    clean_target, weights = _loss_weights(logits, target, mask)
    observed = clean_target[weights > 0]
    if not np.isin(observed, (0.0, 1.0)).all():
        raise LossError("binary targets must be 0 or 1 where the label mask is set")
    return tensor_sum((softplus(logits) - logits * clean_target) * weights)


def auc_roc(scores, labels) -> float:
    """Rank-based AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise LossError(f"{scores.size} scores for {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise LossError("AUC-ROC is undefined when only one class is present")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# Datasets


@dataclass
class GraphDataset:
    """
    task == "node": targets[i] has shape (n_i, n_tasks)
    task == "graph": targets[i] has shape (n_tasks,)
    Masks default to "observed wherever the target is not NaN".
    """

    graphs: list
    targets: list
    task: str = "node"
    masks: list | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.graphs) != len(self.targets):
            raise ConfigurationError(f"{len(self.graphs)} graphs but {len(self.targets)} targets")
        self.targets = [np.asarray(t, dtype=np.float64) for t in self.targets]
        if self.masks is None:
            self.masks = [~np.isnan(t) for t in self.targets]
        else:
            self.masks = [np.asarray(m, dtype=bool) for m in self.masks]

        for i, (g, target, mask) in enumerate(zip(self.graphs, self.targets, self.masks)):
            expected_rank = 2 if self.task == "node" else 1
            if target.ndim != expected_rank or (self.task == "node" and target.shape[0] != g.n):
                raise ConfigurationError(
                    f"target {i} has shape {target.shape}, "
                    f"unsuitable for a {self.task} task on {g.n} nodes"
                )
            if mask.shape != target.shape:
                raise ConfigurationError(f"mask {i} has shape {mask.shape}, target {target.shape}")
        if len({t.shape[-1] for t in self.targets}) > 1:
            raise ConfigurationError("every target must carry the same number of tasks")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def n_tasks(self) -> int:
        return self.targets[0].shape[-1] if self.targets else 0

    @property
    def f_nodes(self) -> int:
        g = self.graphs[0]
        return 1 if g.node_features is None else g.node_features.shape[1]

    def subset(self, indices) -> "GraphDataset":
        indices = list(indices)
        return GraphDataset(
            graphs=[self.graphs[i] for i in indices],
            targets=[self.targets[i] for i in indices],
            task=self.task,
            masks=[self.masks[i] for i in indices],
        )

    def split(self, validation_fraction: float, seed: int = 0) -> tuple:
        """Disjoint (train, validation) datasets."""
        if not 0.0 < validation_fraction < 1.0:
            raise ConfigurationError(
                f"validation fraction must lie in (0, 1), got {validation_fraction}"
            )
        order = np.random.default_rng(seed).permutation(len(self))
        n_valid = max(1, int(round(validation_fraction * len(self))))
        return self.subset(order[n_valid:]), self.subset(order[:n_valid])


@dataclass
class LabeledBatch:
    graphs: BatchedGraphs
    targets: np.ndarray
    mask: np.ndarray
    indices: list = field(default_factory=list)


def make_batch(dataset: GraphDataset, indices, routes: list, pool: bool = True) -> LabeledBatch:
    """Pad targets to the batch layout; padding and pool slots are never labeled."""
    indices = list(indices)
    batched = batch([dataset.graphs[i] for i in indices], [routes[i] for i in indices], pool=pool)
    if dataset.task == "graph":
        targets = np.stack([dataset.targets[i] for i in indices])
        mask = np.stack([dataset.masks[i] for i in indices])
    else:
        shape = (batched.B, batched.n_max, dataset.n_tasks)
        targets, mask = np.zeros(shape), np.zeros(shape, dtype=bool)
        for row, i in enumerate(indices):
            n = dataset.graphs[i].n
            targets[row, :n] = dataset.targets[i]
            mask[row, :n] = dataset.masks[i]
    return LabeledBatch(graphs=batched, targets=targets, mask=mask, indices=indices)


def dataset_routes(dataset: GraphDataset, route_config: RouteFeatureConfig) -> list:
    return [route_features(g, route_config) for g in dataset.graphs]


def iterate_batches(
    dataset: GraphDataset, routes: list, batch_size: int, rng=None, pool: bool = True
):
    order = np.arange(len(dataset)) if rng is None else rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield make_batch(dataset, order[start : start + batch_size], routes, pool=pool)


def save_dataset(dataset: GraphDataset, directory) -> None:
    """
    Layout: one graph document per graph (graph_0000.json, ...) plus
    targets.json = {"task": ..., "n_tasks": ..., "entries": [{"graph", "targets", "mask"}]}.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (g, target, mask) in enumerate(zip(dataset.graphs, dataset.targets, dataset.masks)):
        file_name = f"graph_{i:04d}.json"
        with open(directory / file_name, "w", encoding="utf-8") as fh:
            json.dump(graph_to_json(g), fh)
        entries.append(
            {
                "graph": file_name,
                "targets": np.where(mask, target, 0.0).tolist(),
                "mask": mask.tolist(),
            }
        )
    with open(directory / "targets.json", "w", encoding="utf-8") as fh:
        json.dump({"task": dataset.task, "n_tasks": dataset.n_tasks, "entries": entries}, fh)


def load_dataset(directory) -> GraphDataset:
    directory = Path(directory)
    try:
        with open(directory / "targets.json", "r", encoding="utf-8") as fh:
            document = json.load(fh)
        graphs, targets, masks = [], [], []
        for entry in document["entries"]:
            with open(directory / entry["graph"], "r", encoding="utf-8") as fh:
                graphs.append(load_graph_json(fh.read()))
            targets.append(entry["targets"])
            masks.append(entry.get("mask"))
    except (OSError, json.JSONDecodeError, KeyError) as e:
        logger.warning(f"Error reading dataset {directory}: {e}")
        raise GraphFormatError(f"cannot read dataset {directory}: {e}") from e

    if any(mask is None for mask in masks):
        masks = None
    task = document.get("task", "node")
    return GraphDataset(graphs=graphs, targets=targets, task=task, masks=masks)


# Synthetic tasks


def _random_graph(rng: np.random.Generator, n_range, p: float, connected: bool) -> Graph:
    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        nx_graph = nx.gnp_random_graph(n, p, seed=int(rng.integers(2**31)))
        if not connected or nx.is_connected(nx_graph):
            return Graph.from_edges(n, nx_graph.edges(), node_features=np.ones((n, 1)))


def nodes_within_two(g: Graph) -> np.ndarray:
    distances = shortest_distances(g)
    return ((distances >= 0) & (distances <= 2)).sum(axis=1).astype(np.float64)


def has_four_cycle(g: Graph) -> bool:
    """A 4-cycle exists iff two distinct nodes share at least two neighbors."""
    adjacency = g.adjacency.astype(np.int64)
    common = adjacency @ adjacency
    np.fill_diagonal(common, 0)
    return bool((common >= 2).any())


def synth_node_task(n_graphs: int, seed: int = 0, n_range=(5, 12), p: float = 0.3) -> GraphDataset:
    rng = np.random.default_rng(seed)
    graphs = [_random_graph(rng, n_range, p, connected=True) for _ in range(n_graphs)]
    targets = [nodes_within_two(g)[:, None] for g in graphs]
    return GraphDataset(graphs=graphs, targets=targets, task="node")


def synth_graph_task(n_graphs: int, seed: int = 0, n_range=(5, 12), p: float = 0.3) -> GraphDataset:
    rng = np.random.default_rng(seed)
    graphs = [_random_graph(rng, n_range, p, connected=False) for _ in range(n_graphs)]
    targets = [np.array([1.0 if has_four_cycle(g) else 0.0]) for g in graphs]
    return GraphDataset(graphs=graphs, targets=targets, task="graph")


# Training


@dataclass
class TrainConfig:
    epochs: int = TRAIN_SCHEDULE["epochs"]
    learning_rate: float = TRAIN_SCHEDULE["learning_rate"]
    decay_epochs: tuple = tuple(TRAIN_SCHEDULE["decay_epochs"])
    decay_factor: float = TRAIN_SCHEDULE["decay_factor"]
    batch_size: int = TRAIN_SCHEDULE["batch_size"]
    metric: str = "mae"
    seed: int = 0
    task: str = "node"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigurationError(f"decay factor must lie in (0, 1), got {self.decay_factor}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.metric not in METRICS:
            raise ConfigurationError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        self.decay_epochs = tuple(sorted(self.decay_epochs))

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "auc"

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "decay_epochs": list(self.decay_epochs),
            "decay_factor": self.decay_factor,
            "batch_size": self.batch_size,
            "metric": self.metric,
            "seed": self.seed,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, settings: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(settings) - known)
        if unknown:
            raise ConfigurationError(f"Unknown training settings: {unknown}")
        return cls(**settings)


def learning_rate_at(completed_epochs: int, config: TrainConfig) -> float:
    """Learning rate in force once `completed_epochs` epochs have finished."""
    decays = sum(1 for epoch in config.decay_epochs if epoch <= completed_epochs)
    return config.learning_rate * config.decay_factor**decays


def output_loss(model: InformerModel, output, labeled: LabeledBatch) -> Tensor:
    if model.config.head == "graph_classification":
        return masked_cross_entropy(output, labeled.targets, labeled.mask)
    return masked_mae(output, labeled.targets, labeled.mask)


def batch_loss(
    model: InformerModel, labeled: LabeledBatch, training: bool = False, rng=None
) -> Tensor:
    output = predict(labeled.graphs, model, training=training, rng=rng)
    return output_loss(model, output, labeled)


def evaluate(
    model: InformerModel,
    dataset: GraphDataset,
    route_config: RouteFeatureConfig,
    batch_size: int = TRAIN_SCHEDULE["batch_size"],
    routes: list | None = None,
) -> dict:
    """
    {"loss", "mae"} for node regression; {"loss", "auc", "auc_per_task",
    "tasks_excluded"} for graph classification. Tasks with a single observed
    class get no AUC and are left out of the average.
    """
    routes = routes if routes is not None else dataset_routes(dataset, route_config)
    total_loss, total_count = 0.0, 0
    outputs, targets, masks = [], [], []
    for labeled in iterate_batches(dataset, routes, batch_size, pool=model.config.pool):
        count = int(labeled.mask.sum())
        if count == 0:
            continue
        output = predict(labeled.graphs, model)
        total_loss += output_loss(model, output, labeled).item() * count
        total_count += count
        output = output.data
        if model.config.head == "graph_classification":
            outputs.append(output)
            targets.append(labeled.targets)
            masks.append(labeled.mask)

    if total_count == 0:
        raise LossError("evaluation dataset has no observed labels")
    mean_loss = total_loss / total_count
    if model.config.head != "graph_classification":
        return {"loss": mean_loss, "mae": mean_loss}

    outputs, targets, masks = (np.concatenate(part) for part in (outputs, targets, masks))
    per_task, excluded = [], []
    for task in range(outputs.shape[1]):
        observed = masks[:, task]
        try:
            per_task.append(auc_roc(outputs[observed, task], targets[observed, task]))
        except LossError:
            per_task.append(None)
            excluded.append(task)
    defined = [value for value in per_task if value is not None]
    return {
        "loss": mean_loss,
        "auc": float(np.mean(defined)) if defined else None,
        "auc_per_task": per_task,
        "tasks_excluded": excluded,
    }


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_metric: float
    best_parameters: dict
    checkpoint_path: str | None = None
    best_key: tuple = ()

    def to_dict(self) -> dict:
        return {
            "history": self.history,
            "best_epoch": self.best_epoch,
            "best_metric": self.best_metric,
            "checkpoint_path": self.checkpoint_path,
        }


def _selection_value(metrics: dict, config: TrainConfig) -> tuple:
    """
    (reported value, ranking key); larger keys are better. Epochs with an
    undefined metric rank below every epoch where it is defined and among
    themselves by lower validation loss.
    """
    value = metrics.get(config.metric)
    if value is None:
        logger.warning(f"Validation {config.metric} undefined, selecting by validation loss")
        return metrics["loss"], (0, -metrics["loss"])
    return value, (1, value if config.higher_is_better else -value)


def train(
    model: InformerModel,
    train_set: GraphDataset,
    valid_set: GraphDataset,
    config: TrainConfig,
    route_config: RouteFeatureConfig,
    checkpoint_path=None,
) -> TrainResult:
    """
    Adam over shuffled mini-batches with step decay of the learning rate; the
    parameters of the best validation epoch are restored into `model` (and
    written to `checkpoint_path` when given).
    """
    shuffle_seed, dropout_seed = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    train_routes = dataset_routes(train_set, route_config)
    valid_routes = dataset_routes(valid_set, route_config)
    params = model.named_parameters()
    optimizer = Adam(params, learning_rate=config.learning_rate)

    history = []
    best_epoch, best_value, best_key, best_parameters = None, None, None, None
    batch_id = 0
    for epoch in range(1, config.epochs + 1):
        optimizer.learning_rate = learning_rate_at(epoch - 1, config)
        started = time.perf_counter()
        epoch_loss, epoch_batches = 0.0, 0

        batches = iterate_batches(
            train_set, train_routes, config.batch_size, shuffle_rng, pool=model.config.pool
        )
        for labeled in batches:
            batch_id += 1
            if not labeled.mask.any():
                continue
            optimizer.zero_grad()
            try:
                loss = batch_loss(model, labeled, training=True, rng=dropout_rng)
                loss.backward()
            except NonFiniteError as e:
                logger.error(f"Non-finite value in epoch {epoch}: {e}")
                raise TrainingError(f"non-finite loss in epoch {epoch}: {e}", batch_id) from e
            optimizer.step()
            logger.debug(f"batch {batch_id} graphs={len(labeled.indices)} loss={loss.item():.5f}")
            epoch_loss += loss.item()
            epoch_batches += 1

        metrics = evaluate(model, valid_set, route_config, config.batch_size, valid_routes)
        value, key = _selection_value(metrics, config)
        record = {
            "epoch": epoch,
            "learning_rate": optimizer.learning_rate,
            "train_loss": epoch_loss / max(epoch_batches, 1),
            "valid": metrics,
        }
        history.append(record)

        if best_key is None or key > best_key:
            best_epoch, best_value, best_key = epoch, value, key
            best_parameters = {name: param.data.copy() for name, param in params.items()}

        logger.info(
            f"epoch {epoch}/{config.epochs} lr={optimizer.learning_rate:.2e} "
            f"train_loss={record['train_loss']:.4f} valid_{config.metric}={value:.4f} "
            f"({time.perf_counter() - started:.2f}s)"
        )

    for name, param in params.items():
        param.data = best_parameters[name].copy()

    result = TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_metric=best_value,
        best_parameters=best_parameters,
        best_key=best_key,
    )
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
        result.checkpoint_path = str(checkpoint_path)
    logger.info(f"Best validation {config.metric} {best_value:.4f} at epoch {best_epoch}")
    return result


def toy_configs(
    task: str,
    seed: int = 0,
    ablate_routes: bool = False,
    **train_overrides,
) -> tuple:
    """(InformerConfig, TrainConfig, RouteFeatureConfig) for a desk-scale toy run."""
    route_config = RouteFeatureConfig.from_dict(
        {**TOY_ROUTE_FEATURES, "zero_routes": ablate_routes}
    )
    head = "node_regression" if task == "node" else "graph_classification"
    model_config = InformerConfig.from_dict(
        TOY_MODEL, f_route=route_config.f_route, head=head, n_tasks=1
    )
    schedule = {key: value for key, value in TRAIN_SCHEDULE.items()}
    schedule.update(train_overrides)
    train_config = TrainConfig(
        **schedule,
        metric="mae" if task == "node" else "auc",
        seed=seed,
        task=task,
    )
    return model_config, train_config, route_config


def train_toy(
    task: str,
    seed: int = 0,
    n_graphs: int = TOY_DATA["train_graphs"],
    n_valid: int = TOY_DATA["valid_graphs"],
    ablate_routes: bool = False,
    checkpoint_path=None,
    **train_overrides,
) -> tuple:
    """
    Generate n_graphs + n_valid graphs of a synthetic task, train a toy model on
    the first n_graphs and select epochs on the rest. Returns (model, result).
    """
    if task not in TASKS:
        raise ConfigurationError(f"toy task must be one of {TASKS}, got {task!r}")
    model_config, train_config, route_config = toy_configs(
        task, seed, ablate_routes, **train_overrides
    )
    generate = synth_node_task if task == "node" else synth_graph_task
    if n_graphs < 1 or n_valid < 1:
        raise ConfigurationError(f"need training and validation graphs, got {n_graphs}/{n_valid}")
    dataset = generate(n_graphs + n_valid, seed=seed)
    train_set = dataset.subset(range(n_graphs))
    valid_set = dataset.subset(range(n_graphs, n_graphs + n_valid))
    model = InformerModel.initialize(model_config, seed=seed)
    model.route_features = route_config.to_dict()
    result = train(model, train_set, valid_set, train_config, route_config, checkpoint_path)
    return model, result


def grid_search(
    base_settings: dict,
    grid: dict,
    train_set: GraphDataset,
    valid_set: GraphDataset,
    train_config: TrainConfig,
    route_config: RouteFeatureConfig,
) -> list:
    """
    Train one model per combination of `grid` values layered over
    `base_settings`; returns [(settings, TrainResult)] best first.
    """
    keys = sorted(grid)
    runs = []
    for values in itertools.product(*(grid[key] for key in keys)):
        settings = {**base_settings, **dict(zip(keys, values)), "f_route": route_config.f_route}
        model = InformerModel.initialize(InformerConfig.from_dict(settings), seed=train_config.seed)
        logger.info(f"Grid point {dict(zip(keys, values))}")
        runs.append((settings, train(model, train_set, valid_set, train_config, route_config)))

    return sorted(runs, key=lambda run: run[1].best_key, reverse=True)
