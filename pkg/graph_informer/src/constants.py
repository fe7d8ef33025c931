# Additive mask value standing in for minus infinity.
MASK_VALUE = -1e9

# Shortest-distance sentinel for node pairs in different components.
UNREACHABLE = -1

LAYER_NORM_EPS = 1e-5

GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4

SEPARATION_THRESHOLD = 1e-4

CHECKPOINT_VERSION = 1

ADAM_DEFAULTS = {
    "learning_rate": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
}

# Untrained 1-layer network used by the isomorphism harness.
ISO_TEST_MODEL = {
    "n_layers": 1,
    "d_hidden": 8,
    "n_heads": 4,
    "d_k": 2,
    "d_v": 2,
    "d_r": 2,
    "radius": None,
    "score_map": "sigmoid",
    "f_nodes": 1,
    "dropout": 0.0,
    "head": "graph_classification",
    "n_tasks": 1,
}
ISO_TEST_ROUTE_FEATURES = {"histogram_k": 4, "distance_bins": None}
ISO_TEST_SEEDS = list(range(20))

# Desk-scale toy runs.
TOY_MODEL = {
    "n_layers": 2,
    "d_hidden": 48,
    "n_heads": 6,
    "d_k": 8,
    "d_v": 8,
    "d_r": 8,
    "radius": 2,
    "score_map": "softmax",
    "f_nodes": 1,
    "dropout": 0.1,
    "dropout_mode": "element",
    "pool": False,
}
TOY_ROUTE_FEATURES = {
    "histogram_k": 4,
    "distance_bins": [[0, 0], [1, 1], [2, 2], [3, None], "unreachable"],
}
TOY_DATA = {
    "train_graphs": 500,
    "valid_graphs": 100,
}

TRAIN_SCHEDULE = {
    "epochs": 100,
    "learning_rate": 1e-3,
    "decay_epochs": [40, 70],
    "decay_factor": 0.3,
    "batch_size": 16,
}

GRADCHECK_MODEL = {
    "n_layers": 2,
    "d_hidden": 8,
    "n_heads": 2,
    "d_k": 4,
    "d_v": 4,
    "d_r": 4,
    "radius": 2,
    "f_nodes": 2,
    "dropout": 0.0,
    "n_tasks": 2,
}
GRADCHECK_ROUTE_FEATURES = {
    "histogram_k": 3,
    "distance_bins": [[0, 0], [1, 1], [2, None], "unreachable"],
}

BUILTIN_SET_NAMES = ["RegN6D3", "RegN8D3", "Q4", "Hoffman", "Q4-vs-Hoffman"]
