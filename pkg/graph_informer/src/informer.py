"""
Graph Informer network: input embedding, stacked residual RouteMHSA blocks and
node/graph output heads.

Each layer computes
    T  = H + LayerNorm(dropout(Linear(RouteMHSA(H))))
    H' = T + LayerNorm(dropout(FFN(T))),   FFN(x) = W2 ReLU(W1 x + b1) + b2
so the unnormalized residual path carries H straight through the stack.
"""

from dataclasses import dataclass, field

import numpy as np

from .constants import CHECKPOINT_VERSION
from .errors import CheckpointError, ConfigurationError, DimensionError
from .graphs import BatchedGraphs
from .logging import set_local_logger
from .nn import dropout, init_uniform, linear, load_parameters, save_parameters
from .route_attention import AttentionConfig, RouteMHSAParams, dump_entries, route_mhsa
from .tensor import Tensor, as_tensor, einsum, layer_norm, relu, tanh

logger = set_local_logger(__name__)

HEAD_TYPES = ("node_regression", "graph_classification")
BLOCK_STYLES = ("residual", "post_norm")


@dataclass
class InformerConfig:
    n_layers: int
    n_heads: int
    d_k: int
    f_route: int
    d_hidden: int | None = None
    d_v: int | None = None
    d_r: int | None = None
    radius: int | list | None = None
    r_min: int = 0
    score_map: str = "softmax"
    f_nodes: int = 1
    d_ffn: int | None = None
    dropout: float = 0.0
    dropout_mode: str = "element"
    head: str = "node_regression"
    n_tasks: int = 1
    block_style: str = "residual"
    pool: bool = True

    def __post_init__(self):
        if not isinstance(self.n_layers, int) or self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers!r}")
        if self.d_hidden is None:
            self.d_hidden = self.d_k * self.n_heads
        elif self.d_hidden != self.d_k * self.n_heads:
            logger.debug(
                f"Untied hidden size: d_hidden={self.d_hidden}, "
                f"d_k * n_heads={self.d_k * self.n_heads}"
            )
        if self.d_v is None:
            self.d_v = self.d_k
        if self.d_r is None:
            self.d_r = self.d_k
        if self.d_ffn is None:
            self.d_ffn = self.d_hidden
        if self.head not in HEAD_TYPES:
            raise ConfigurationError(f"head must be one of {HEAD_TYPES}, got {self.head!r}")
        if self.block_style not in BLOCK_STYLES:
            raise ConfigurationError(
                f"block_style must be one of {BLOCK_STYLES}, got {self.block_style!r}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("d_hidden", "f_route", "f_nodes", "d_ffn", "n_tasks"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        # validates heads, sizes, score map and radii
        self.attention

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            n_heads=self.n_heads,
            d_k=self.d_k,
            d_v=self.d_v,
            d_r=self.d_r,
            score_map=self.score_map,
            radius=self.radius,
            r_min=self.r_min,
        )

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_k": self.d_k,
            "d_v": self.d_v,
            "d_r": self.d_r,
            "d_hidden": self.d_hidden,
            "f_route": self.f_route,
            "radius": self.radius,
            "r_min": self.r_min,
            "score_map": self.score_map,
            "f_nodes": self.f_nodes,
            "d_ffn": self.d_ffn,
            "dropout": self.dropout,
            "dropout_mode": self.dropout_mode,
            "head": self.head,
            "n_tasks": self.n_tasks,
            "block_style": self.block_style,
            "pool": self.pool,
        }

    @classmethod
    def from_dict(cls, settings: dict, **overrides) -> "InformerConfig":
        merged = {**settings, **overrides}
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ConfigurationError(f"Unknown model settings: {unknown}")
        return cls(**merged)


@dataclass
class LayerParams:
    attention: RouteMHSAParams
    w_o: Tensor
    b_o: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    DENSE = ("w_o", "b_o", "ln1_gamma", "ln1_beta", "w1", "b1", "w2", "b2", "ln2_gamma", "ln2_beta")

    @classmethod
    def initialize(cls, config: InformerConfig, rng: np.random.Generator) -> "LayerParams":
        d, d_ffn, d_cat = config.d_hidden, config.d_ffn, config.n_heads * config.d_v
        return cls(
            attention=RouteMHSAParams.initialize(config.attention, d, config.f_route, rng),
            w_o=init_uniform(rng, d_cat, (d_cat, d)),
            b_o=Tensor(np.zeros(d), requires_grad=True),
            ln1_gamma=Tensor(np.ones(d), requires_grad=True),
            ln1_beta=Tensor(np.zeros(d), requires_grad=True),
            w1=init_uniform(rng, d, (d, d_ffn)),
            b1=Tensor(np.zeros(d_ffn), requires_grad=True),
            w2=init_uniform(rng, d_ffn, (d_ffn, d)),
            b2=Tensor(np.zeros(d), requires_grad=True),
            ln2_gamma=Tensor(np.ones(d), requires_grad=True),
            ln2_beta=Tensor(np.zeros(d), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> dict:
        params = self.attention.named_parameters(f"{prefix}attn.")
        params.update({f"{prefix}{name}": getattr(self, name) for name in self.DENSE})
        return params

    @classmethod
    def from_named(cls, params: dict, prefix: str) -> "LayerParams":
        attention = RouteMHSAParams(
            **{name: params[f"{prefix}attn.{name}"] for name in RouteMHSAParams.NAMES}
        )
        return cls(attention=attention, **{name: params[f"{prefix}{name}"] for name in cls.DENSE})


@dataclass
class InformerModel:
    config: InformerConfig
    w_in: Tensor
    pool_embedding: Tensor
    layers: list
    head: dict = field(default_factory=dict)
    route_features: dict | None = None

    @classmethod
    def initialize(cls, config: InformerConfig, seed: int = 0) -> "InformerModel":
        rng = np.random.default_rng(seed)
        d = config.d_hidden
        w_in = init_uniform(rng, config.f_nodes, (config.f_nodes, d))
        pool_embedding = Tensor(rng.normal(0.0, 1.0, size=d), requires_grad=True)
        layers = [LayerParams.initialize(config, rng) for _ in range(config.n_layers)]
        head = {
            "w1": init_uniform(rng, d, (d, d)),
            "b1": Tensor(np.zeros(d), requires_grad=True),
            "w2": init_uniform(rng, d, (d, config.n_tasks)),
            "b2": Tensor(np.zeros(config.n_tasks), requires_grad=True),
        }
        return cls(
            config=config, w_in=w_in, pool_embedding=pool_embedding, layers=layers, head=head
        )

    def named_parameters(self) -> dict:
        params = {"embed.w_in": self.w_in, "embed.pool": self.pool_embedding}
        for i, layer in enumerate(self.layers):
            params.update(layer.named_parameters(f"layer{i}."))
        params.update({f"head.{name}": value for name, value in self.head.items()})
        return params

    @classmethod
    def from_named_parameters(cls, config: InformerConfig, values: dict) -> "InformerModel":
        reference = cls.initialize(config).named_parameters()
        missing = sorted(set(reference) - set(values))
        extra = sorted(set(values) - set(reference))
        if missing or extra:
            raise CheckpointError(
                f"Parameter names do not match the config: missing {missing}, unexpected {extra}"
            )
        params = {}
        for name, expected in reference.items():
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != expected.shape:
                raise CheckpointError(
                    f"Parameter {name!r} has shape {value.shape}, config expects {expected.shape}"
                )
            params[name] = Tensor(value.copy(), requires_grad=True)

        layers = [LayerParams.from_named(params, f"layer{i}.") for i in range(config.n_layers)]
        head = {name: params[f"head.{name}"] for name in ("w1", "b1", "w2", "b2")}
        return cls(
            config=config,
            w_in=params["embed.w_in"],
            pool_embedding=params["embed.pool"],
            layers=layers,
            head=head,
        )


def embed_inputs(batch: BatchedGraphs, model: InformerModel) -> Tensor:
    features = batch.node_features
    if features.shape[-1] != model.config.f_nodes:
        raise DimensionError(
            f"Batch node features have dimension {features.shape[-1]}, "
            f"model expects {model.config.f_nodes}"
        )
    # Padding and pool rows of the features are zero, so only real nodes project.
    H0 = as_tensor(features) @ model.w_in
    return H0 + batch.pool_indicator()[..., None] * model.pool_embedding


def layer_forward(
    H,
    P,
    masks: tuple,
    layer_params: LayerParams,
    config: InformerConfig,
    training: bool = False,
    rng=None,
    return_probs: bool = False,
):
    """masks = (M_node, M_route); M_route may be per-head (B, heads, N, N)."""
    M_node, M_route = masks
    H = as_tensor(H)
    if H.ndim != 3 or H.shape[-1] != config.d_hidden:
        raise DimensionError(f"H must be (B, N, {config.d_hidden}), got {H.shape}")

    def drop(x):
        return dropout(x, config.dropout, config.dropout_mode, training, rng)

    p = layer_params
    attended, A = route_mhsa(
        H, P, M_node, M_route, p.attention, config.attention, return_probs=True
    )
    mixed = drop(linear(attended, p.w_o, p.b_o))

    if config.block_style == "post_norm":
        T = layer_norm(H + mixed, p.ln1_gamma, p.ln1_beta)
        hidden = linear(relu(linear(T, p.w1, p.b1)), p.w2, p.b2)
        out = layer_norm(T + drop(hidden), p.ln2_gamma, p.ln2_beta)
    else:
        T = H + layer_norm(mixed, p.ln1_gamma, p.ln1_beta)
        hidden = drop(linear(relu(linear(T, p.w1, p.b1)), p.w2, p.b2))
        out = T + layer_norm(hidden, p.ln2_gamma, p.ln2_beta)

    if return_probs:
        return out, A
    return out


def forward(
    batch: BatchedGraphs,
    model: InformerModel,
    training: bool = False,
    rng=None,
    record_attention: bool = False,
):
    """
    Final hidden states (B, N_max, d_hidden). With record_attention the
    per-layer attention probabilities are returned alongside.
    """
    config = model.config
    if batch.f_route != config.f_route:
        raise DimensionError(
            f"Batch route features have dimension {batch.f_route}, model expects {config.f_route}"
        )
    masks = (batch.M_node, batch.route_masks(config.attention.head_radii(), config.r_min))

    H = embed_inputs(batch, model)
    recorded = []
    for layer_params in model.layers:
        H, A = layer_forward(
            H, batch.P, masks, layer_params, config, training=training, rng=rng, return_probs=True
        )
        if record_attention:
            recorded.append(A.data)

    if record_attention:
        return H, recorded
    return H


def node_head(H_L, model: InformerModel) -> Tensor:
    head = model.head
    return linear(tanh(linear(H_L, head["w1"], head["b1"])), head["w2"], head["b2"])


def _mean_weights(batch: BatchedGraphs) -> np.ndarray:
    real = batch.real_node_mask().astype(np.float64)
    return real / np.maximum(batch.node_counts, 1)[:, None]


def graph_head(H_L, batch: BatchedGraphs, model: InformerModel) -> Tensor:
    head = model.head
    per_node = relu(linear(H_L, head["w1"], head["b1"]))
    pooled = einsum("bn,bnd->bd", _mean_weights(batch), per_node)
    return linear(pooled, head["w2"], head["b2"])


def sum_readout(H_L, batch: BatchedGraphs) -> Tensor:
    real = batch.real_node_mask().astype(np.float64)
    return einsum("bn,bnd->bd", real, H_L)


def predict(batch: BatchedGraphs, model: InformerModel, training: bool = False, rng=None) -> Tensor:
    H_L = forward(batch, model, training=training, rng=rng)
    if model.config.head == "graph_classification":
        return graph_head(H_L, batch, model)
    return node_head(H_L, model)


def attention_dump(batch: BatchedGraphs, model: InformerModel) -> list:
    _, recorded = forward(batch, model, record_attention=True)
    entries = []
    for layer, A in enumerate(recorded):
        entries.extend(dump_entries(A, batch.node_counts, batch.pool, layer))
    return entries


def save_checkpoint(path, model: InformerModel) -> None:
    header = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict()}
    if model.route_features is not None:
        header["route_features"] = model.route_features
    save_parameters(path, model.named_parameters(), header)
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path) -> InformerModel:
    header, values = load_parameters(path)
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    if "config" not in header:
        raise CheckpointError(f"Checkpoint {path} has no model config")
    try:
        config = InformerConfig.from_dict(header["config"])
    except (ConfigurationError, TypeError) as e:
        raise CheckpointError(f"Checkpoint {path} holds an invalid config: {e}") from e
    model = InformerModel.from_named_parameters(config, values)
    model.route_features = header.get("route_features")
    return model
