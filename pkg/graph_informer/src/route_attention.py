"""
Route-based multi-head self-attention.

Scores combine node query/key products with route query/route key products,
    S = (Q K^T + Q_R (x) K_R) / sqrt(d_k + d_r) + M,
where (Q_R (x) K_R)[k, l] = Q_R[k] . K_R[k, l]. Probabilities are a row softmax
(ordinary) or an elementwise sigmoid (injective variant), and the output of a
head is row k -> sum_l A[k, l] (V[l] + V_R[k, l]).

Heads are computed together: projections are stored as (in, heads * size)
matrices and split into a head axis after the product. Batch and head axes
lead every tensor, e.g. scores are (B, heads, N, N).
"""

from dataclasses import dataclass

import numpy as np

from .constants import MASK_VALUE
from .errors import ConfigurationError, DimensionError
from .nn import init_uniform
from .tensor import Tensor, as_tensor, einsum, sigmoid, softmax_rows, transpose

SCORE_MAPS = ("softmax", "sigmoid")
_LEAD = "abcde"


@dataclass
class AttentionConfig:
    n_heads: int
    d_k: int
    d_v: int
    d_r: int
    score_map: str = "softmax"
    radius: int | list | None = None
    r_min: int = 0

    def __post_init__(self):
        for name in ("n_heads", "d_k", "d_v", "d_r"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.score_map not in SCORE_MAPS:
            raise ConfigurationError(
                f"score_map must be one of {SCORE_MAPS}, got {self.score_map!r}"
            )
        if isinstance(self.radius, (list, tuple)):
            if len(self.radius) != self.n_heads:
                raise ConfigurationError(
                    f"{len(self.radius)} per-head radii given for {self.n_heads} heads"
                )
            self.radius = list(self.radius)
        for radius in self.head_radii():
            if radius is not None and radius < 0:
                raise ConfigurationError(f"attention radius must be >= 0, got {radius}")

    @property
    def injective(self) -> bool:
        return self.score_map == "sigmoid"

    def head_radii(self) -> list:
        if isinstance(self.radius, list):
            return list(self.radius)
        return [self.radius] * self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_heads": self.n_heads,
            "d_k": self.d_k,
            "d_v": self.d_v,
            "d_r": self.d_r,
            "score_map": self.score_map,
            "radius": self.radius,
            "r_min": self.r_min,
        }

    @classmethod
    def from_dict(cls, settings: dict) -> "AttentionConfig":
        return cls(
            n_heads=settings["n_heads"],
            d_k=settings["d_k"],
            d_v=settings["d_v"],
            d_r=settings["d_r"],
            score_map=settings.get("score_map", "softmax"),
            radius=settings.get("radius"),
            r_min=settings.get("r_min", 0),
        )


@dataclass
class RouteMHSAParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_qr: Tensor
    w_kr: Tensor
    w_vr: Tensor

    NAMES = ("w_q", "w_k", "w_v", "w_qr", "w_kr", "w_vr")

    @classmethod
    def initialize(
        cls, config: AttentionConfig, d_model: int, f_route: int, rng: np.random.Generator
    ) -> "RouteMHSAParams":
        h = config.n_heads
        return cls(
            w_q=init_uniform(rng, d_model, (d_model, h * config.d_k)),
            w_k=init_uniform(rng, d_model, (d_model, h * config.d_k)),
            w_v=init_uniform(rng, d_model, (d_model, h * config.d_v)),
            w_qr=init_uniform(rng, d_model, (d_model, h * config.d_r)),
            w_kr=init_uniform(rng, f_route, (f_route, h * config.d_r)),
            w_vr=init_uniform(rng, f_route, (f_route, h * config.d_v)),
        )

    def named_parameters(self, prefix: str = "") -> dict:
        return {f"{prefix}{name}": getattr(self, name) for name in self.NAMES}

    def expected_shapes(self, config: AttentionConfig, d_model: int, f_route: int) -> dict:
        h = config.n_heads
        return {
            "w_q": (d_model, h * config.d_k),
            "w_k": (d_model, h * config.d_k),
            "w_v": (d_model, h * config.d_v),
            "w_qr": (d_model, h * config.d_r),
            "w_kr": (f_route, h * config.d_r),
            "w_vr": (f_route, h * config.d_v),
        }

    def validate(self, config: AttentionConfig, d_model: int, f_route: int) -> None:
        for name, shape in self.expected_shapes(config, d_model, f_route).items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ConfigurationError(
                    f"RouteMHSA parameter {name} has shape {actual}, config expects {shape}"
                )

    def head(self, i: int, config: AttentionConfig) -> dict:
        """Head i's matrices in (out x in) orientation: W_Q, W_K, W_V, W_Q^route, ..."""
        if not 0 <= i < config.n_heads:
            raise ConfigurationError(f"head index {i} outside 0..{config.n_heads - 1}")

        def block(weight, size):
            return weight.data[:, i * size : (i + 1) * size].T.copy()

        return {
            "W_Q": block(self.w_q, config.d_k),
            "W_K": block(self.w_k, config.d_k),
            "W_V": block(self.w_v, config.d_v),
            "W_Q_route": block(self.w_qr, config.d_r),
            "W_K_route": block(self.w_kr, config.d_r),
            "W_V_route": block(self.w_vr, config.d_v),
        }


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def route_scores(Q, K, Q_R, K_R, M=None) -> Tensor:
    Q, K, Q_R, K_R = (as_tensor(t) for t in (Q, K, Q_R, K_R))
    lead = Q.shape[:-2]
    n, d_k = Q.shape[-2:]
    if K.shape != Q.shape:
        raise DimensionError(f"K has shape {K.shape}, expected Q's shape {Q.shape}")
    if Q_R.ndim != Q.ndim or Q_R.shape[:-1] != Q.shape[:-1]:
        raise DimensionError(f"Q_R has shape {Q_R.shape}, expected {lead + (n, 'd_r')}")
    d_r = Q_R.shape[-1]
    if K_R.shape != lead + (n, n, d_r):
        raise DimensionError(f"K_R has shape {K_R.shape}, expected {lead + (n, n, d_r)}")

    letters = _LEAD[: len(lead)]
    node_term = Q @ _swap_last(K)
    route_term = einsum(f"{letters}kf,{letters}klf->{letters}kl", Q_R, K_R)
    scores = (node_term + route_term) / float(np.sqrt(d_k + d_r))

    if M is not None:
        M = as_tensor(M)
        try:
            np.broadcast_shapes(M.shape, scores.shape)
        except ValueError:
            raise DimensionError(
                f"mask M has shape {M.shape}, not broadcastable to scores {scores.shape}"
            ) from None
        scores = scores + M
    return scores


def attention_probs(S, score_map: str) -> Tensor:
    """
    softmax: row-normalized; a row with every entry masked (padding) becomes
    all zeros. sigmoid: elementwise, masked entries underflow to exactly 0.
    """
    S = as_tensor(S)
    if score_map == "softmax":
        A = softmax_rows(S)
        live_rows = S.data.max(axis=-1, keepdims=True) > MASK_VALUE / 2
        if not live_rows.all():
            A = A * live_rows.astype(np.float64)
        return A
    if score_map == "sigmoid":
        return sigmoid(S)
    raise ConfigurationError(f"score_map must be one of {SCORE_MAPS}, got {score_map!r}")


def route_attn(A, V, V_R) -> Tensor:
    A, V, V_R = as_tensor(A), as_tensor(V), as_tensor(V_R)
    lead = A.shape[:-2]
    n = A.shape[-1]
    if A.shape[-2] != n:
        raise DimensionError(f"A must be square over nodes, got {A.shape}")
    if V.ndim != A.ndim or V.shape[:-1] != lead + (n,):
        raise DimensionError(f"V has shape {V.shape}, expected {lead + (n, 'd_v')}")
    d_v = V.shape[-1]
    if V_R.shape != lead + (n, n, d_v):
        raise DimensionError(f"V_R has shape {V_R.shape}, expected {lead + (n, n, d_v)}")

    letters = _LEAD[: len(lead)]
    return A @ V + einsum(f"{letters}kl,{letters}klv->{letters}kv", A, V_R)


def route_mhsa(
    H,
    P,
    M_node,
    M_route,
    params: RouteMHSAParams,
    config: AttentionConfig,
    return_probs: bool = False,
):
    """
    H: (B, N, d); P: (B, N, N, F_route); M_node: (B, N);
    M_route: (B, N, N) shared by all heads or (B, heads, N, N).
    Returns (B, N, heads * d_v), plus A of shape (B, heads, N, N) when
    return_probs is set.
    """
    H = as_tensor(H)
    P = as_tensor(P)
    if H.ndim != 3:
        raise DimensionError(f"H must be (B, N, d), got {H.shape}")
    b, n, d = H.shape
    if P.ndim != 4 or P.shape[:3] != (b, n, n):
        raise DimensionError(f"P has shape {P.shape}, expected {(b, n, n, 'F_route')}")
    params.validate(config, d, P.shape[3])

    h = config.n_heads

    def heads_first(x, size):
        return x.reshape(b, n, h, size).transpose(0, 2, 1, 3)

    def route_heads_first(x, size):
        return x.reshape(b, n, n, h, size).transpose(0, 3, 1, 2, 4)

    Q = heads_first(H @ params.w_q, config.d_k)
    K = heads_first(H @ params.w_k, config.d_k)
    V = heads_first(H @ params.w_v, config.d_v)
    Q_R = heads_first(H @ params.w_qr, config.d_r)
    K_R = route_heads_first(P @ params.w_kr, config.d_r)
    V_R = route_heads_first(P @ params.w_vr, config.d_v)

    M_node = np.asarray(M_node, dtype=np.float64)
    M_route = np.asarray(M_route, dtype=np.float64)
    if M_node.shape != (b, n):
        raise DimensionError(f"M_node has shape {M_node.shape}, expected {(b, n)}")
    if M_route.shape == (b, n, n):
        M_route = M_route[:, None, :, :]
    elif M_route.shape != (b, h, n, n):
        raise DimensionError(
            f"M_route has shape {M_route.shape}, expected {(b, n, n)} or {(b, h, n, n)}"
        )
    M = M_route + M_node[:, None, None, :]

    S = route_scores(Q, K, Q_R, K_R, M)
    A = attention_probs(S, config.score_map)
    X = route_attn(A, V, V_R)
    out = X.transpose(0, 2, 1, 3).reshape(b, n, h * config.d_v)

    if return_probs:
        return out, A
    return out


def dump_entries(A: np.ndarray, node_counts, pool: bool, layer: int) -> list:
    """
    Format attention probabilities (B, heads, N, N) as dump records. Each
    matrix keeps the real nodes of its sample followed by the pool slot.
    """
    A = np.asarray(A)
    b, heads, n_max, _ = A.shape
    entries = []
    for sample in range(b):
        count = int(node_counts[sample])
        slots = list(range(count))
        labels = [str(i) for i in range(count)]
        pool_index = None
        if pool:
            slots.append(n_max - 1)
            labels.append("pool")
            pool_index = count
        block = A[sample][:, slots][:, :, slots]
        for head in range(heads):
            entries.append(
                {
                    "layer": layer,
                    "head": head,
                    "sample": sample,
                    "matrix": block[head].tolist(),
                    "node_labels": labels,
                    "pool_index": pool_index,
                }
            )
    return entries


def attn_dump(
    H,
    P,
    M_node,
    M_route,
    params: RouteMHSAParams,
    config: AttentionConfig,
    node_counts=None,
    pool: bool = False,
    layer: int = 0,
) -> list:
    _, A = route_mhsa(H, P, M_node, M_route, params, config, return_probs=True)
    if node_counts is None:
        node_counts = (np.asarray(M_node) == 0).sum(axis=1) - (1 if pool else 0)
    return dump_entries(A.data, node_counts, pool, layer)
