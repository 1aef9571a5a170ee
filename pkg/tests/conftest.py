import numpy as np
import pytest

from gram.ehr import PatientRecord, make_group_map
from gram.ontology import OntologyDag

# Worked-example hierarchy: leaves d, e, h, i, k; k reaches the root along two paths.
FIG1_EDGES = [
    ("d", "b"),
    ("e", "b"),
    ("h", "f"),
    ("i", "g"),
    ("k", "j"),
    ("j", "f"),
    ("j", "c"),
    ("g", "c"),
    ("f", "b"),
    ("b", "a"),
    ("c", "a"),
]


@pytest.fixture
def fig1():
    return OntologyDag.from_edges(FIG1_EDGES)


def small_dag(rng: np.random.Generator, num_leaves: int = 12) -> OntologyDag:
    """12 leaves + 5 internals + root; every internal has a child, I2 has two paths up."""
    internal = ["I0", "I1", "I2", "I3"]
    edges = []
    for i in range(num_leaves):
        first = internal[i % 4]
        edges.append((f"L{i}", first))
        if rng.random() < 0.5:
            other = internal[(i + 1 + int(rng.integers(3))) % 4]
            edges.append((f"L{i}", other))
    edges += [("I0", "I4"), ("I1", "I4"), ("I2", "I0"), ("I2", "I1"), ("I3", "root"), ("I4", "root")]
    return OntologyDag.from_edges(edges)


def random_dag(rng: np.random.Generator, max_nodes: int = 50) -> OntologyDag:
    """Random layered DAG with a single root, at most ``max_nodes`` nodes."""
    n_internal = int(rng.integers(1, max_nodes // 3))
    n_leaves = int(rng.integers(1, max_nodes - n_internal))
    internal = [f"n{i}" for i in range(n_internal)]
    edges = []
    # internal node k attaches to earlier internals or the root
    for k, name in enumerate(internal):
        pool = ["root"] + internal[:k]
        for p in rng.choice(len(pool), size=min(len(pool), int(rng.integers(1, 3))), replace=False):
            edges.append((name, pool[p]))
    for i in range(n_leaves):
        for p in rng.choice(n_internal, size=min(n_internal, int(rng.integers(1, 4))), replace=False):
            edges.append((f"x{i}", internal[p]))
    # every internal needs a child so it is not mistaken for a leaf
    has_child = {p for _, p in edges}
    for k, name in enumerate(internal):
        if name not in has_child:
            edges.append((f"x{k % n_leaves}", name))
    return OntologyDag.from_edges(edges)


@pytest.fixture
def toy_records():
    return [
        PatientRecord("p0", (frozenset({0}), frozenset({1, 2}), frozenset({3}))),
        PatientRecord("p1", (frozenset({1}), frozenset({4}))),
        PatientRecord("p2", (frozenset({2, 3}), frozenset({0, 4}), frozenset({1}), frozenset({2}))),
    ]


@pytest.fixture
def fig1_groups(fig1):
    # group = direct parent name
    return make_group_map({i: fig1.names[min(fig1.parents[i])] for i in range(fig1.num_leaves)}, fig1.num_leaves)


def gradient_errors(seed: int, task: str, h: float = 1e-5, l2: float = 0.01) -> dict[str, float]:
    """Relative error per parameter array between analytic and central-difference gradients.

    Model: m=6, l=5, r=7 over a 12-leaf, 18-node DAG; one patient with three visits.
    """
    from gram import model as M
    from gram.ontology import ancestor_map

    rng = np.random.default_rng(seed)
    dag = small_dag(rng)
    L = 5 if task == "sequential" else 1
    state = M.init_state(
        num_nodes=dag.num_nodes,
        embedding_dim=6,
        hidden_dim=7,
        num_outputs=L,
        attention_dim=5,
        amap=ancestor_map(dag),
        task=task,
        seed=seed,
    )
    # move away from the zero biases so every path carries gradient
    for key, value in state.params.items():
        state.params[key] = value + rng.normal(0.0, 0.3, value.shape)
    visits = [sorted(rng.choice(12, size=int(rng.integers(1, 4)), replace=False).tolist()) for _ in range(3)]
    if task == "sequential":
        targets = [[sorted(rng.choice(L, size=int(rng.integers(1, 3)), replace=False).tolist()) for _ in range(3)]]
    else:
        targets = [int(rng.integers(2))]
    batch = M.make_batch([visits], dag.num_leaves, targets, L, task)
    _, _, cache = M.forward(state, batch, l2=l2)
    grads = M.backward(state, batch, cache)
    errors = {}
    for key, p in state.params.items():
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            plus = M.forward(state, batch, l2=l2)[0]
            p[idx] = old - h
            minus = M.forward(state, batch, l2=l2)[0]
            p[idx] = old
            numeric[idx] = (plus - minus) / (2 * h)
        scale = np.linalg.norm(numeric) + np.linalg.norm(grads[key])
        errors[key] = float(np.linalg.norm(numeric - grads[key]) / scale) if scale > 0 else 0.0
    return errors


DIRECTIONAL_SEEDS = (0, 1, 2)
DIRECTIONAL_DIM = 32


def directional_run(seed: int, dim: int = DIRECTIONAL_DIM) -> dict:
    """GRAM+ and a parameter-matched RNN on the default synthetic preset."""
    import time

    from gram.ehr import label_frequencies, split_dataset
    from gram.evaluation import evaluate_state
    from gram.synth import SynthConfig, generate
    from gram.training import TrainConfig, count_parameters, matched_embedding_dim, train

    ds = generate(SynthConfig(seed=seed))
    split = split_dataset(ds.records, (0.75, 0.10, 0.15), seed)
    freq = label_frequencies(split.train, ds.group_map)
    dag, L = ds.dag, ds.group_map.num_groups
    budget = count_parameters("gram", num_nodes=dag.num_nodes, num_inputs=dag.num_leaves,
                              num_outputs=L, m=dim, r=dim, l=dim)
    rnn_m = matched_embedding_dim(budget, num_inputs=dag.num_leaves, num_outputs=L, r=dim)
    configs = {
        "gram+": TrainConfig(m=dim, r=dim, l=dim, model_kind="gram", init_mode="glove_augmented",
                             max_epochs=30, seed=seed),
        "rnn": TrainConfig(m=rnn_m, r=dim, l=dim, model_kind="rnn", max_epochs=30, seed=seed),
    }
    out = {"seed": seed}
    for name, config in configs.items():
        start = time.perf_counter()
        state, report = train(config, split, dag, ds.group_map)
        result = evaluate_state(state, split.test, ds.group_map, freq, ks=(5,))
        out[name] = {
            "rarest_acc5": result.bins[5][0],
            "acc5": result.accuracy_at_k[5],
            "best_valid_loss": min(report.valid_loss),
            "epochs": report.epochs_run,
            "params": state.num_parameters(),
            "seconds": time.perf_counter() - start,
        }
    return out


@pytest.fixture(scope="session")
def directional_results():
    return [directional_run(seed) for seed in DIRECTIONAL_SEEDS]
