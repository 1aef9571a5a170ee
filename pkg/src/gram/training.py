"""Mini-batch training with early stopping, and the baseline model variants."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import model as M
from .ehr import DatasetSplit, GroupMap, PatientRecord
from .embedding import build_cooccurrence, glove_fit
from .ontology import OntologyDag, ancestor_map, direct_parent

logger = logging.getLogger(__name__)

MODEL_KINDS = ("gram", "random_dag", "rnn", "simple_rollup", "rollup_rare")
INIT_MODES = ("random", "glove_augmented", "glove_leaf_only")
ATTENTION_KINDS = ("gram", "random_dag")


class TrainingDiverged(FloatingPointError):
    """Loss went non-finite; ``state`` holds the last good checkpoint."""

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


@dataclass
class TrainConfig:
    m: int = 100
    r: int = 100
    l: int = 100
    l2_coeff: float = 0.001
    dropout_rate: float = 0.0
    batch_size: int = 100
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    init_mode: str = "random"
    model_kind: str = "gram"
    rollup_threshold: int = 10
    task: str = "sequential"
    rho: float = 0.95
    epsilon: float = 1e-6
    glove_epochs: int = 50
    glove_lr: float = 0.05

    def __post_init__(self):
        if min(self.m, self.r, self.l) < 1:
            raise ValueError("dimensions m, r, l must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.init_mode == "glove_augmented" and self.model_kind not in ATTENTION_KINDS:
            raise ValueError("glove_augmented initialisation needs an attention model")
        if self.task not in ("sequential", "binary"):
            raise ValueError(f"task must be 'sequential' or 'binary', got {self.task!r}")
        if self.max_epochs < 0 or self.patience < 0 or self.rollup_threshold < 0:
            raise ValueError("max_epochs, patience and rollup_threshold must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values; unknown keys are rejected."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = type(getattr(cls, key))(raw)
        return cls(**kwargs)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    glove_seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def write_log(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,train_loss,valid_loss,seconds\n")
            for i, (tl, vl, s) in enumerate(zip(self.train_loss, self.valid_loss, self.seconds), 1):
                fh.write(f"{i},{float(tl)!r},{float(vl)!r},{s:.3f}\n")


# ---------------------------------------------------------------------------
# Baseline constructions
# ---------------------------------------------------------------------------


def make_random_dag(dag: OntologyDag, seed: int = 0, num_ancestors: int = 5) -> OntologyDag:
    """Same nodes, but every leaf gets ``num_ancestors`` random ancestors.

    The shared root is one of them; the other ``num_ancestors - 1`` are
    distinct non-root internal nodes sampled uniformly per leaf and wired as
    direct parents. Every non-root internal node hangs directly off the root,
    so each leaf's ancestor set is exactly its sample plus the root.
    """
    pool = np.arange(dag.num_leaves, dag.num_nodes - 1)
    if len(pool) + 1 < num_ancestors:
        raise ValueError(
            f"need at least {num_ancestors} internal nodes, DAG has {dag.num_internal}"
        )
    rng = np.random.default_rng(seed)
    parents = []
    for _ in range(dag.num_leaves):
        picks = rng.choice(pool, size=num_ancestors - 1, replace=False)
        parents.append(tuple(int(p) for p in np.sort(picks)))
    parents += [(dag.root,)] * len(pool) + [()]
    return OntologyDag(names=dag.names, parents=tuple(parents), num_leaves=dag.num_leaves, root=dag.root)


def code_frequencies(records: Iterable[PatientRecord], num_nodes: int) -> np.ndarray:
    """Number of visits containing each code."""
    counts = np.zeros(num_nodes, dtype=np.int64)
    for rec in records:
        for visit in rec.visits:
            counts[list(visit)] += 1
    return counts


def rollup_map(
    dag: OntologyDag,
    threshold: float | None = None,
    frequencies: np.ndarray | None = None,
) -> np.ndarray:
    """Replacement id per node: its direct parent if rare, else itself.

    ``threshold=None`` rolls every node up. The root maps to itself.
    """
    out = np.arange(dag.num_nodes)
    for node in range(dag.num_nodes):
        if threshold is None or frequencies[node] < threshold:
            out[node] = direct_parent(dag, node)
    return out


def _apply_map(records: Iterable[PatientRecord], mapping: np.ndarray) -> list[PatientRecord]:
    return [
        PatientRecord(rec.patient_id, tuple(frozenset(int(mapping[c]) for c in v) for v in rec.visits))
        for rec in records
    ]


def rollup_simple(records: Sequence[PatientRecord], dag: OntologyDag) -> list[PatientRecord]:
    """Replace every code with its direct parent (smallest parent id)."""
    return _apply_map(records, rollup_map(dag))


def rollup_rare(
    records: Sequence[PatientRecord],
    dag: OntologyDag,
    threshold: float,
    reference: Sequence[PatientRecord] | None = None,
) -> list[PatientRecord]:
    """Replace codes seen in fewer than ``threshold`` visits by their parent.

    Frequencies come from ``reference`` (normally the training split) and
    default to ``records`` themselves.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    freq = code_frequencies(reference if reference is not None else records, dag.num_nodes)
    return _apply_map(records, rollup_map(dag, threshold, freq))


# ---------------------------------------------------------------------------
# Model structure per configuration
# ---------------------------------------------------------------------------


@dataclass
class InputSpec:
    """How leaf codes reach the network.

    Attributes:
        column: input column for each leaf id.
        names: display name per input column.
        amap: ancestor lists per input column (attention models only).
        num_nodes: rows of the embedding table.
        dag: the DAG attention runs over (possibly a RandomDAG).
    """

    column: np.ndarray
    names: list[str]
    amap: list[list[int]] | None
    num_nodes: int
    dag: OntologyDag | None = None

    @property
    def num_inputs(self) -> int:
        return len(self.names)


def build_input_spec(config: TrainConfig, dag: OntologyDag | None, train: Sequence[PatientRecord]) -> InputSpec:
    kind = config.model_kind
    if kind in ATTENTION_KINDS:
        if dag is None:
            raise ValueError(f"model kind {kind!r} needs an ontology")
        att_dag = make_random_dag(dag, config.seed) if kind == "random_dag" else dag
        return InputSpec(
            column=np.arange(dag.num_leaves),
            names=list(dag.names[: dag.num_leaves]),
            amap=ancestor_map(att_dag),
            num_nodes=dag.num_nodes,
            dag=att_dag,
        )
    if kind == "rnn":
        if dag is not None:
            names = list(dag.names[: dag.num_leaves])
        else:
            num = 1 + max((c for rec in train for v in rec.visits for c in v), default=0)
            names = [str(i) for i in range(num)]
        return InputSpec(np.arange(len(names)), names, None, len(names))
    if dag is None:
        raise ValueError(f"model kind {kind!r} needs an ontology")
    if kind == "simple_rollup":
        mapping = rollup_map(dag)
    else:
        freq = code_frequencies(train, dag.num_nodes)
        mapping = rollup_map(dag, config.rollup_threshold, freq)
    leaf_targets = mapping[: dag.num_leaves]
    vocab = np.unique(leaf_targets)
    column = np.searchsorted(vocab, leaf_targets)
    return InputSpec(column, [dag.names[i] for i in vocab], None, len(vocab))


def count_parameters(
    kind: str,
    *,
    num_nodes: int,
    num_inputs: int,
    num_outputs: int,
    m: int,
    r: int,
    l: int = 0,
) -> int:
    """Trainable parameter count of a configuration, without building it."""
    gru = 3 * (r * m + r * r + r)
    out = num_outputs * r + num_outputs
    if kind in ATTENTION_KINDS:
        return num_nodes * m + (2 * m * l + 2 * l) + gru + out
    return num_inputs * m + gru + out


def matched_embedding_dim(target: int, *, num_inputs: int, num_outputs: int, r: int) -> int:
    """Embedding size that brings a non-attention model closest to ``target``."""
    fixed = 3 * (r * r + r) + num_outputs * r + num_outputs
    per_unit = num_inputs + 3 * r
    return max(1, int(round((target - fixed) / per_unit)))


# ---------------------------------------------------------------------------
# Encoding and the loop
# ---------------------------------------------------------------------------


@dataclass
class EncodedData:
    inputs: list[list[list[int]]]
    targets: list

    def __len__(self):
        return len(self.inputs)


def encode(
    records: Sequence[PatientRecord],
    spec: InputSpec,
    gm: GroupMap | None,
    task: str = "sequential",
    flags: dict[str, int] | None = None,
) -> EncodedData:
    inputs = [[sorted({int(spec.column[c]) for c in v}) for v in rec.visits] for rec in records]
    if task == "binary":
        if flags is None:
            raise ValueError("binary task needs per-patient flags")
        try:
            targets = [int(flags[rec.patient_id]) for rec in records]
        except KeyError as err:
            raise ValueError(f"no flag for patient {err.args[0]!r}") from None
    else:
        if gm is None:
            raise ValueError("sequential task needs a group map")
        targets = [[sorted({gm[c] for c in v}) for v in rec.visits] for rec in records]
    return EncodedData(inputs, targets)


def batch_of(data: EncodedData, idx, state: M.ModelState, num_outputs: int) -> M.Batch:
    return M.make_batch(
        [data.inputs[i] for i in idx],
        state.num_inputs,
        [data.targets[i] for i in idx],
        num_outputs,
        task=state.task,
    )


def num_outputs_for(config: TrainConfig, gm: GroupMap | None) -> int:
    return 1 if config.task == "binary" else gm.num_groups


def evaluate_loss(state: M.ModelState, data: EncodedData, num_outputs: int, batch_size: int = 100) -> float:
    """Mean per-patient loss, dropout-free and without the L2 penalty."""
    if len(data) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        batch = batch_of(data, idx, state, num_outputs)
        loss, _, _ = M.forward(state, batch)
        total += loss * batch.size
    return total / len(data)


def predict_proba(state: M.ModelState, data: EncodedData, num_outputs: int, batch_size: int = 100) -> list:
    """Per patient: ``(T-1, L)`` step probabilities, or a scalar for binary."""
    out = []
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        batch = batch_of(data, idx, state, num_outputs)
        _, yhat, _ = M.forward(state, batch)
        for b, length in enumerate(batch.lengths):
            out.append(float(yhat[b]) if state.task == "binary" else yhat[b, : length - 1].copy())
    return out


def initial_embeddings(config: TrainConfig, spec: InputSpec, train: Sequence[PatientRecord]) -> np.ndarray | None:
    if config.init_mode == "random":
        return None
    if config.init_mode == "glove_augmented":
        cooc = build_cooccurrence(train, spec.amap, spec.num_nodes)
        return glove_fit(cooc, config.m, iters=config.glove_epochs, lr=config.glove_lr, seed=config.seed).vectors
    # leaf-only: co-occurrence over input columns, no ancestors
    encoded = [
        PatientRecord(rec.patient_id, tuple(frozenset(int(spec.column[c]) for c in v) for v in rec.visits))
        for rec in train
    ]
    cooc = build_cooccurrence(encoded, None, spec.num_inputs)
    vectors = glove_fit(cooc, config.m, iters=config.glove_epochs, lr=config.glove_lr, seed=config.seed).vectors
    if spec.num_nodes == spec.num_inputs:
        return vectors
    rng = np.random.default_rng([config.seed, 2])
    limit = np.sqrt(6.0 / (spec.num_nodes + config.m))
    full = rng.uniform(-limit, limit, size=(spec.num_nodes, config.m))
    full[: spec.num_inputs] = vectors
    return full


def build_model(
    config: TrainConfig,
    dag: OntologyDag | None,
    gm: GroupMap | None,
    train: Sequence[PatientRecord],
) -> tuple[M.ModelState, InputSpec]:
    spec = build_input_spec(config, dag, train)
    emb = initial_embeddings(config, spec, train)
    state = M.init_state(
        num_nodes=spec.num_nodes,
        embedding_dim=config.m,
        hidden_dim=config.r,
        num_outputs=num_outputs_for(config, gm),
        attention_dim=config.l if spec.amap is not None else None,
        amap=spec.amap,
        task=config.task,
        embeddings=emb,
        seed=config.seed,
    )
    state.meta.update(
        config=dataclasses.asdict(config),
        input_column=[int(c) for c in spec.column],
        input_names=spec.names,
        leaf_names=list(dag.names[: dag.num_leaves]) if dag is not None else spec.names,
        node_names=list(dag.names) if dag is not None else spec.names,
        group_names=list(gm.names) if gm is not None else [],
        group_of_leaf=list(gm.groups) if gm is not None else [],
    )
    return state, spec


def train(
    config: TrainConfig,
    split: DatasetSplit,
    dag: OntologyDag | None,
    gm: GroupMap | None,
    flags: dict[str, int] | None = None,
    verbose: bool = False,
) -> tuple[M.ModelState, TrainReport]:
    """Fit a model and return the checkpoint with the lowest validation loss.

    Runs the optional GloVe phase, then epochs of shuffled mini-batches with
    Adadelta. Training stops after ``patience`` epochs without a validation
    improvement, or at ``max_epochs``.
    """
    report = TrainReport()
    t0 = time.perf_counter()
    state, spec = build_model(config, dag, gm, split.train)
    report.glove_seconds = time.perf_counter() - t0
    n_out = num_outputs_for(config, gm)
    train_data = encode(split.train, spec, gm, config.task, flags)
    valid_data = encode(split.validation, spec, gm, config.task, flags)
    if len(train_data) == 0:
        raise ValueError("training split is empty")

    rng = np.random.default_rng([config.seed, 1])
    best_state = state.copy()
    best_loss = math.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_data))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            batch = batch_of(train_data, idx, state, n_out)
            mask = None
            if config.dropout_rate > 0:
                keep = 1.0 - config.dropout_rate
                shape = (batch.size, batch.X.shape[1], config.r)
                mask = (rng.random(shape) < keep) / keep
            loss, _, cache = M.forward(state, batch, dropout_mask=mask, l2=config.l2_coeff)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch}", best_state, report)
            try:
                grads = M.backward(state, batch, cache)
            except FloatingPointError as err:
                raise TrainingDiverged(f"epoch {epoch}: {err}", best_state, report) from err
            M.adadelta_step(state, grads, rho=config.rho, eps=config.epsilon)
            total += loss * len(idx)
        train_loss = total / len(train_data)
        valid_loss = evaluate_loss(state, valid_data, n_out, config.batch_size) if len(valid_data) else train_loss
        state.epoch = epoch
        report.train_loss.append(train_loss)
        report.valid_loss.append(valid_loss)
        report.seconds.append(time.perf_counter() - start)
        if verbose:
            logger.info("epoch %d train %.5f valid %.5f", epoch, train_loss, valid_loss)
        if valid_loss < best_loss:
            best_loss, best_state, stale = valid_loss, state.copy(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if stale > config.patience:
                break
    return best_state, report


def read_config(path: str | os.PathLike) -> dict[str, str]:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in text.split("=", 1))
            values[key] = value
    return values


def spec_from_state(state: M.ModelState) -> InputSpec:
    """Input encoding recorded in a trained model's metadata."""
    meta = state.meta
    return InputSpec(
        column=np.asarray(meta["input_column"], dtype=np.int64),
        names=list(meta["input_names"]),
        amap=None,
        num_nodes=state.params["E"].shape[0],
    )
