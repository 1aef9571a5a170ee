"""scikit-learn style wrapper around training and evaluation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import model as M
from .checkpoint import save_checkpoint
from .ehr import DatasetSplit, GroupMap, label_frequencies
from .evaluation import DEFAULT_KS, EvalReport, evaluate_state
from .ontology import OntologyDag
from .training import TrainConfig, encode, predict_proba, spec_from_state, train
from .validation import check_binary_targets, check_records


class GRAMClassifier(ClassifierMixin, BaseEstimator):
    """Next-visit diagnosis (or binary onset) predictor over patient records.

    ``X`` is always a sequence of :class:`~gram.ehr.PatientRecord`. For the
    sequential task targets come from the records themselves through
    ``group_map`` and ``y`` is ignored; for the binary task ``y`` holds one
    0/1 label per patient.

    ``model_kind`` selects GRAM (attention over ``ontology``), RandomDAG, or
    one of the RNN baselines; ``init_mode`` selects random or GloVe
    initialisation of the basic embeddings.
    """

    def __init__(
        self,
        ontology: OntologyDag | None = None,
        group_map: GroupMap | None = None,
        *,
        model_kind: str = "gram",
        init_mode: str = "random",
        task: str = "sequential",
        embedding_dim: int = 100,
        hidden_dim: int = 100,
        attention_dim: int = 100,
        l2_coeff: float = 0.001,
        dropout_rate: float = 0.0,
        batch_size: int = 100,
        max_epochs: int = 30,
        patience: int = 5,
        rollup_threshold: int = 10,
        glove_epochs: int = 50,
        glove_lr: float = 0.05,
        rho: float = 0.95,
        epsilon: float = 1e-6,
        random_state: int = 0,
    ):
        self.ontology = ontology
        self.group_map = group_map
        self.model_kind = model_kind
        self.init_mode = init_mode
        self.task = task
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.attention_dim = attention_dim
        self.l2_coeff = l2_coeff
        self.dropout_rate = dropout_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.rollup_threshold = rollup_threshold
        self.glove_epochs = glove_epochs
        self.glove_lr = glove_lr
        self.rho = rho
        self.epsilon = epsilon
        self.random_state = random_state

    def to_config(self) -> TrainConfig:
        return TrainConfig(
            m=self.embedding_dim,
            r=self.hidden_dim,
            l=self.attention_dim,
            l2_coeff=self.l2_coeff,
            dropout_rate=self.dropout_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
            init_mode=self.init_mode,
            model_kind=self.model_kind,
            rollup_threshold=self.rollup_threshold,
            task=self.task,
            rho=self.rho,
            epsilon=self.epsilon,
            glove_epochs=self.glove_epochs,
            glove_lr=self.glove_lr,
        )

    def _num_codes(self):
        return self.ontology.num_leaves if self.ontology is not None else None

    def _check(self, X, y=None):
        min_visits = 2 if self.task == "sequential" else 1
        records = check_records(X, self._num_codes(), min_visits)
        flags = check_binary_targets(y, records) if self.task == "binary" else None
        if self.task == "sequential" and self.group_map is None:
            raise ValueError("sequential task needs a group_map")
        return records, flags

    def fit(self, X, y=None, eval_set=None):
        """Train on ``X``; ``eval_set=(X_val, y_val)`` drives early stopping."""
        config = self.to_config()
        records, flags = self._check(X, y)
        valid = []
        if eval_set is not None:
            X_val, y_val = eval_set
            valid, valid_flags = self._check(X_val, y_val)
            if flags is not None:
                flags = {**flags, **valid_flags}
        split = DatasetSplit(records, valid, [])
        self.state_, self.report_ = train(config, split, self.ontology, self.group_map, flags)
        if self.task == "sequential":
            self.label_frequencies_ = label_frequencies(records, self.group_map)
        self.classes_ = np.arange(self.state_.params["W_out"].shape[0]) if self.task == "sequential" else np.array([0, 1])
        self.n_parameters_ = self.state_.num_parameters()
        return self

    def _probs(self, X):
        check_is_fitted(self, "state_")
        records = check_records(X, self._num_codes(), 2 if self.task == "sequential" else 1)
        spec = spec_from_state(self.state_)
        flags = {r.patient_id: 0 for r in records} if self.task == "binary" else None
        data = encode(records, spec, self.group_map, self.task, flags)
        return predict_proba(self.state_, data, self.state_.params["W_out"].shape[0])

    def predict_proba(self, X):
        """Binary: ``(n, 2)`` array. Sequential: per patient a ``(T-1, L)`` array."""
        probs = self._probs(X)
        if self.task == "binary":
            p = np.asarray(probs)
            return np.column_stack([1.0 - p, p])
        return probs

    def predict(self, X, k: int = 1):
        """Binary: 0/1 per patient. Sequential: top-``k`` label ids per step."""
        probs = self._probs(X)
        if self.task == "binary":
            return (np.asarray(probs) >= 0.5).astype(int)
        return [np.argsort(-p, axis=1, kind="stable")[:, :k] for p in probs]

    def evaluate(self, X, y=None, ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
        check_is_fitted(self, "state_")
        records, flags = self._check(X, y)
        freq = self.label_frequencies_ if self.task == "sequential" else None
        return evaluate_state(self.state_, records, self.group_map, freq, flags, ks)

    def score(self, X, y=None, sample_weight=None):
        """AUC for the binary task, mean per-label Accuracy@5 otherwise."""
        report = self.evaluate(X, y, ks=(5,) if self.task == "sequential" else ())
        return report.auc if self.task == "binary" else report.accuracy_at_k[5]

    def final_representations(self) -> np.ndarray:
        """Rows are the learned code representations fed to the GRU."""
        check_is_fitted(self, "state_")
        return M.embedding_matrix(self.state_).T

    def save(self, path) -> None:
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path)
