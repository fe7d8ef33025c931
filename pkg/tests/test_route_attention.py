import math
import time

import networkx as nx
import numpy as np
import pytest

from graph_informer.src.constants import MASK_VALUE
from graph_informer.src.errors import ConfigurationError, DimensionError
from graph_informer.src.graphs import Graph, batch, route_histogram, shortest_distances
from graph_informer.src.nn import grad_check
from graph_informer.src.route_attention import (
    AttentionConfig,
    RouteMHSAParams,
    attention_probs,
    attn_dump,
    route_attn,
    route_mhsa,
    route_scores,
)
from graph_informer.src.tensor import Tensor, tensor_sum


def random_graph(seed, n=7, p=0.35):
    g = nx.gnp_random_graph(n, p, seed=seed)
    return Graph.from_edges(n, g.edges())


def build_setup(graphs, config, d=6, k=3, seed=0, pool=False):
    rng = np.random.default_rng(seed)
    batched = batch(graphs, [route_histogram(g, k) for g in graphs], pool=pool)
    params = RouteMHSAParams.initialize(config, d, k, rng)
    H = rng.normal(size=(batched.B, batched.n_max, d))
    M_route = batched.route_masks(config.head_radii(), config.r_min)
    return batched, params, H, M_route


def test_scores_without_route_term():
    rng = np.random.default_rng(0)
    Q, K = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    Q_R, K_R = rng.normal(size=(4, 2)), np.zeros((4, 4, 2))
    S = route_scores(Q, K, Q_R, K_R, np.zeros((4, 4))).data
    np.testing.assert_allclose(S, Q @ K.T / math.sqrt(5), atol=1e-12)


def test_scores_without_node_term():
    rng = np.random.default_rng(1)
    Q_R, K_R = rng.normal(size=(4, 2)), rng.normal(size=(4, 4, 2))
    S = route_scores(np.zeros((4, 3)), np.zeros((4, 3)), Q_R, K_R).data
    expected = np.array([[Q_R[k] @ K_R[k, l] for l in range(4)] for k in range(4)]) / math.sqrt(5)
    np.testing.assert_allclose(S, expected, atol=1e-12)


def test_scores_match_loop_oracle():
    rng = np.random.default_rng(2)
    b, h, n, d_k, d_r = 2, 3, 5, 4, 2
    Q, K = rng.normal(size=(b, h, n, d_k)), rng.normal(size=(b, h, n, d_k))
    Q_R, K_R = rng.normal(size=(b, h, n, d_r)), rng.normal(size=(b, h, n, n, d_r))
    M = rng.normal(size=(b, 1, n, n))
    S = route_scores(Q, K, Q_R, K_R, M).data
    for s in range(b):
        for head in range(h):
            for k in range(n):
                for l in range(n):
                    node = sum(Q[s, head, k, i] * K[s, head, l, i] for i in range(d_k))
                    route = sum(Q_R[s, head, k, i] * K_R[s, head, k, l, i] for i in range(d_r))
                    expected = (node + route) / math.sqrt(d_k + d_r) + M[s, 0, k, l]
                    assert S[s, head, k, l] == pytest.approx(expected, abs=1e-12)


def test_scores_report_bad_shapes():
    with pytest.raises(DimensionError, match="K_R"):
        route_scores(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2, 2)))
    with pytest.raises(DimensionError, match="mask"):
        q = np.ones((3, 2))
        route_scores(q, q, q, np.ones((3, 3, 2)), np.ones((2, 2)))


def test_attention_probs_softmax_and_sigmoid():
    np.testing.assert_allclose(
        attention_probs(np.array([[0.0, 0.0, MASK_VALUE]]), "softmax").data, [[0.5, 0.5, 0.0]]
    )
    sigmoid = attention_probs(np.array([[0.0, MASK_VALUE]]), "sigmoid").data
    assert sigmoid[0, 0] == 0.5
    assert sigmoid[0, 1] == 0.0


def test_fully_masked_softmax_rows_are_zero():
    S = np.array([[0.0, MASK_VALUE], [MASK_VALUE, MASK_VALUE]])
    np.testing.assert_array_equal(attention_probs(S, "softmax").data, [[1.0, 0.0], [0.0, 0.0]])


def test_attention_probs_rejects_unknown_map():
    with pytest.raises(ConfigurationError):
        attention_probs(np.zeros((2, 2)), "relu")


def test_route_attn_identity_cases():
    rng = np.random.default_rng(3)
    V, V_R = rng.normal(size=(3, 2)), rng.normal(size=(3, 3, 2))
    np.testing.assert_allclose(route_attn(np.eye(3), V, np.zeros((3, 3, 2))).data, V)
    expected = np.stack([V_R[k, k] for k in range(3)])
    np.testing.assert_allclose(route_attn(np.eye(3), np.zeros((3, 2)), V_R).data, expected)


def test_route_attn_matches_loop_oracle():
    rng = np.random.default_rng(4)
    b, n, d_v = 2, 4, 3
    A, V, V_R = rng.random((b, n, n)), rng.normal(size=(b, n, d_v)), rng.normal(size=(b, n, n, d_v))
    out = route_attn(A, V, V_R).data
    for s in range(b):
        for k in range(n):
            expected = sum(A[s, k, l] * (V[s, l] + V_R[s, k, l]) for l in range(n))
            np.testing.assert_allclose(out[s, k], expected, atol=1e-12)


def test_route_mhsa_single_head_by_hand():
    config = AttentionConfig(n_heads=1, d_k=1, d_v=1, d_r=1)
    params = RouteMHSAParams(
        w_q=Tensor([[1.0]]),
        w_k=Tensor([[1.0]]),
        w_v=Tensor([[1.0]]),
        w_qr=Tensor([[1.0]]),
        w_kr=Tensor([[2.0]]),
        w_vr=Tensor([[3.0]]),
    )
    H = np.array([[[1.0], [2.0]]])
    P = np.array([[[[0.0], [1.0]], [[1.0], [0.0]]]])
    out = route_mhsa(H, P, np.zeros((1, 2)), np.zeros((1, 2, 2)), params, config).data

    # S = [[1, 4], [6, 4]] / sqrt(2)
    a01 = 1.0 / (1.0 + math.exp(-3.0 / math.sqrt(2.0)))
    a10 = 1.0 / (1.0 + math.exp(-2.0 / math.sqrt(2.0)))
    expected_0 = (1.0 - a01) * 1.0 + a01 * (2.0 + 3.0)
    expected_1 = a10 * (1.0 + 3.0) + (1.0 - a10) * 2.0
    np.testing.assert_allclose(out[0, :, 0], [expected_0, expected_1], atol=1e-12)


def test_zero_routes_reduce_to_dot_product_attention():
    config = AttentionConfig(n_heads=2, d_k=3, d_v=2, d_r=2)
    g = random_graph(5)
    batched, params, H, M_route = build_setup([g], config)
    out = route_mhsa(H, np.zeros_like(batched.P), batched.M_node, M_route, params, config).data

    heads = []
    for i in range(2):
        view = params.head(i, config)
        Q, K, V = H[0] @ view["W_Q"].T, H[0] @ view["W_K"].T, H[0] @ view["W_V"].T
        scores = Q @ K.T / math.sqrt(3 + 2)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        heads.append((weights / weights.sum(axis=1, keepdims=True)) @ V)
    np.testing.assert_allclose(out[0], np.concatenate(heads, axis=1), atol=1e-12)


@pytest.mark.parametrize("score_map", ["softmax", "sigmoid"])
@pytest.mark.parametrize("seed", range(50))
def test_route_mhsa_is_permutation_equivariant(score_map, seed):
    config = AttentionConfig(n_heads=2, d_k=3, d_v=2, d_r=2, score_map=score_map, radius=2)
    n = 4 + seed % 6
    g = random_graph(seed, n=n)
    perm = np.random.default_rng(seed).permutation(n)
    batched, params, H, M_route = build_setup([g], config, seed=seed)
    out = route_mhsa(H, batched.P, batched.M_node, M_route, params, config).data

    permuted = batch([g.permute(perm)], [route_histogram(g.permute(perm), 3)], pool=False)
    H_permuted = np.empty_like(H)
    H_permuted[0, perm] = H[0]
    out_permuted = route_mhsa(
        H_permuted,
        permuted.P,
        permuted.M_node,
        permuted.route_masks(config.head_radii()),
        params,
        config,
    ).data
    np.testing.assert_allclose(out_permuted[0, perm], out[0], atol=1e-10)


def test_padding_leaves_real_rows_unchanged():
    config = AttentionConfig(n_heads=2, d_k=2, d_v=2, d_r=2, radius=2)
    small, large = random_graph(7, n=4, p=0.6), random_graph(8, n=7)
    alone, params, H_alone, M_alone = build_setup([small], config)
    padded, _, H_padded, M_padded = build_setup([small, large], config)
    H_padded[0, :4] = H_alone[0]

    out_alone = route_mhsa(H_alone, alone.P, alone.M_node, M_alone, params, config).data
    out_padded = route_mhsa(H_padded, padded.P, padded.M_node, M_padded, params, config).data
    np.testing.assert_allclose(out_padded[0, :4], out_alone[0], atol=1e-10)


def test_batched_equals_per_graph():
    config = AttentionConfig(n_heads=2, d_k=2, d_v=3, d_r=2, score_map="sigmoid")
    graphs = [random_graph(9, n=5), random_graph(10, n=6)]
    batched, params, H, M_route = build_setup(graphs, config, pool=True)
    together = route_mhsa(H, batched.P, batched.M_node, M_route, params, config).data
    for s, g in enumerate(graphs):
        single = batch([g], [route_histogram(g, 3)], pool=True)
        H_single = np.concatenate([H[s, : g.n], H[s, -1:]])[None]
        out = route_mhsa(
            H_single,
            single.P,
            single.M_node,
            single.route_masks(config.head_radii()),
            params,
            config,
        ).data
        np.testing.assert_allclose(out[0, : g.n], together[s, : g.n], atol=1e-10)
        np.testing.assert_allclose(out[0, -1], together[s, -1], atol=1e-10)


@pytest.mark.parametrize("seed", range(100))
def test_attention_stays_inside_the_ball(seed):
    config = AttentionConfig(n_heads=3, d_k=2, d_v=2, d_r=2, radius=[1, 2, None])
    n = 5 + seed % 6
    spine = [(node, node + 1) for node in range(n - 1)]
    g = Graph.from_edges(n, [*spine, *random_graph(seed, n=n, p=0.2).edges()])
    batched, params, H, M_route = build_setup([g], config, seed=seed, pool=True)
    _, A = route_mhsa(H, batched.P, batched.M_node, M_route, params, config, return_probs=True)
    distances = shortest_distances(g)
    for head, radius in enumerate([1, 2]):
        outside = distances > radius
        assert (A.data[0, head, :n, :n][outside] <= 1e-12).all()
        assert (A.data[0, head, :n, n] > 0).all()
    assert (A.data[0, 2, :n, :n] > 0).all()


def test_route_mhsa_gradient_check():
    config = AttentionConfig(n_heads=2, d_k=2, d_v=3, d_r=2, radius=1)
    g = Graph.from_edges(4, [(0, 1), (1, 2), (1, 3)])
    batched, params, H, M_route = build_setup([g], config, d=4, pool=True)
    H = Tensor(H, requires_grad=True)
    weights = np.random.default_rng(11).normal(size=(1, 5, 6))

    def loss():
        out = route_mhsa(H, batched.P, batched.M_node, M_route, params, config)
        return tensor_sum(out * weights)

    inputs = [H, *params.named_parameters().values()]
    assert grad_check(loss, inputs) < 1e-4


def test_route_mhsa_validates_shapes():
    config = AttentionConfig(n_heads=2, d_k=2, d_v=2, d_r=2)
    batched, params, H, M_route = build_setup([random_graph(0, n=4)], config)
    with pytest.raises(ConfigurationError, match="w_q"):
        route_mhsa(H[..., :5], batched.P, batched.M_node, M_route, params, config)
    with pytest.raises(DimensionError, match="M_route"):
        route_mhsa(H, batched.P, batched.M_node, M_route[:, :, :2], params, config)


def test_attention_config_validation():
    with pytest.raises(ConfigurationError):
        AttentionConfig(n_heads=0, d_k=2, d_v=2, d_r=2)
    with pytest.raises(ConfigurationError):
        AttentionConfig(n_heads=2, d_k=2, d_v=2, d_r=2, score_map="tanh")
    with pytest.raises(ConfigurationError):
        AttentionConfig(n_heads=2, d_k=2, d_v=2, d_r=2, radius=[1])
    config = AttentionConfig.from_dict({"n_heads": 2, "d_k": 2, "d_v": 2, "d_r": 2, "radius": 3})
    assert config.head_radii() == [3, 3]
    assert AttentionConfig.from_dict(config.to_dict()) == config


def test_head_view_orientation():
    config = AttentionConfig(n_heads=2, d_k=3, d_v=4, d_r=5)
    params = RouteMHSAParams.initialize(config, 6, 7, np.random.default_rng(0))
    view = params.head(1, config)
    assert view["W_Q"].shape == (3, 6)
    assert view["W_V"].shape == (4, 6)
    assert view["W_K_route"].shape == (5, 7)
    np.testing.assert_array_equal(view["W_Q"], params.w_q.data[:, 3:6].T)
    with pytest.raises(ConfigurationError):
        params.head(2, config)


def test_attn_dump_records():
    config = AttentionConfig(n_heads=2, d_k=2, d_v=2, d_r=2, radius=1)
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    batched, params, H, M_route = build_setup([g], config, pool=True)
    entries = attn_dump(
        H, batched.P, batched.M_node, M_route, params, config, batched.node_counts, pool=True
    )
    assert [entry["head"] for entry in entries] == [0, 1]
    for entry in entries:
        assert entry["node_labels"] == ["0", "1", "2", "3", "pool"]
        assert entry["pool_index"] == 4
        matrix = np.array(entry["matrix"])
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-9)
        assert matrix[0, 2] <= 1e-12 and matrix[0, 3] <= 1e-12


def best_route_mhsa_time(n, config, repeats=5):
    g = random_graph(n, n=n, p=0.05)
    batched, params, H, M_route = build_setup([g], config, seed=n)
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        route_mhsa(H, batched.P, batched.M_node, M_route, params, config)
        timings.append(time.perf_counter() - start)
    return min(timings)


@pytest.mark.slow
def test_route_mhsa_time_grows_quadratically():
    config = AttentionConfig(n_heads=2, d_k=4, d_v=4, d_r=4)
    best_route_mhsa_time(64, config, repeats=1)
    ratio = best_route_mhsa_time(480, config) / best_route_mhsa_time(240, config)
    assert 3.0 <= ratio <= 6.0
