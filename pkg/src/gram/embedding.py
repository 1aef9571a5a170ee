"""Ancestor-augmented co-occurrence counts and GloVe basic embeddings."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ehr import PatientRecord, Visit


@dataclass(frozen=True)
class SparseCooccurrence:
    """Symmetric co-occurrence counts stored once per unordered pair.

    ``rows[k] < cols[k]`` for every stored entry; entries are sorted by
    ``(row, col)`` and every stored value is positive. The diagonal is never
    stored.
    """

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def get(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        i, j = min(i, j), max(i, j)
        key = i * self.dim + j
        keys = self.rows * self.dim + self.cols
        pos = np.searchsorted(keys, key)
        if pos < len(keys) and keys[pos] == key:
            return float(self.values[pos])
        return 0.0

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        out[self.rows, self.cols] = self.values
        out[self.cols, self.rows] = self.values
        return out

    @classmethod
    def from_keys(cls, dim: int, keys: np.ndarray, values: np.ndarray) -> "SparseCooccurrence":
        """Sum duplicate ``row * dim + col`` keys into a sorted matrix."""
        if len(keys) == 0:
            empty = np.zeros(0, dtype=np.int64)
            return cls(dim, empty, empty.copy(), np.zeros(0))
        uniq, inverse = np.unique(keys, return_inverse=True)
        summed = np.zeros(len(uniq))
        np.add.at(summed, inverse, values)
        keep = summed > 0
        uniq, summed = uniq[keep], summed[keep]
        return cls(dim, uniq // dim, uniq % dim, summed)


def augment_visit(visit: Visit, amap: Sequence[Sequence[int]] | None) -> list[int]:
    """Each code followed by its distinct ancestors; shared ancestors repeat.

    With ``amap=None`` the visit is returned unaugmented.
    """
    out: list[int] = []
    for code in sorted(visit):
        out.extend(amap[code] if amap is not None else (code,))
    return out


def _visit_keys(counts: Counter, dim: int) -> tuple[np.ndarray, np.ndarray]:
    nodes = np.fromiter(sorted(counts), dtype=np.int64)
    c = np.array([counts[n] for n in nodes], dtype=np.float64)
    iu, ju = np.triu_indices(len(nodes), k=1)
    return nodes[iu] * dim + nodes[ju], c[iu] * c[ju]


def build_cooccurrence(
    records: Iterable[PatientRecord],
    amap: Sequence[Sequence[int]] | None,
    dim: int,
) -> SparseCooccurrence:
    """Sum ``count(i, V') * count(j, V')`` over every augmented visit ``V'``.

    Args:
        records: patients whose visits are counted.
        amap: ancestor list per leaf (self first); ``None`` counts raw visits.
        dim: matrix size, the number of DAG nodes (or vocabulary size).
    """
    key_parts, value_parts = [], []
    for rec in records:
        for visit in rec.visits:
            counts = Counter(augment_visit(visit, amap))
            if len(counts) < 2:
                continue
            k, v = _visit_keys(counts, dim)
            key_parts.append(k)
            value_parts.append(v)
    if not key_parts:
        return SparseCooccurrence.from_keys(dim, np.zeros(0, dtype=np.int64), np.zeros(0))
    return SparseCooccurrence.from_keys(dim, np.concatenate(key_parts), np.concatenate(value_parts))


def merge_cooccurrence(parts: Sequence[SparseCooccurrence]) -> SparseCooccurrence:
    """Combine shard-local matrices; the result does not depend on shard order."""
    if not parts:
        raise ValueError("nothing to merge")
    dim = parts[0].dim
    if any(p.dim != dim for p in parts):
        raise ValueError("cannot merge matrices of different sizes")
    keys = np.concatenate([p.rows * dim + p.cols for p in parts])
    values = np.concatenate([p.values for p in parts])
    return SparseCooccurrence.from_keys(dim, keys, values)


def write_cooccurrence(m: SparseCooccurrence, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, j, v in zip(m.rows, m.cols, m.values):
            fh.write(f"{int(i)}\t{int(j)}\t{float(v)!r}\n")


def read_cooccurrence(path: str | os.PathLike, dim: int) -> SparseCooccurrence:
    rows, cols, vals = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            i, j, v = line.split("\t")
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(v))
    keys = np.array(rows, dtype=np.int64) * dim + np.array(cols, dtype=np.int64)
    return SparseCooccurrence.from_keys(dim, keys, np.array(vals))


def glove_weight(x, x_max: float = 100.0, alpha: float = 0.75):
    """GloVe weighting ``min(1, (x / x_max) ** alpha)``; works on arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x < x_max, (np.maximum(x, 0.0) / x_max) ** alpha, 1.0)
    return out if out.ndim else float(out)


@dataclass
class BasicEmbeddings:
    vectors: np.ndarray
    biases: np.ndarray


class GloVe(BaseEstimator, TransformerMixin):
    """Symmetric GloVe fit on a co-occurrence matrix.

    One vector and one bias per node minimise
    ``sum_{i != j} f(M_ij) (e_i . e_j + b_i + b_j - log M_ij)^2``
    using AdaGrad over shuffled mini-batches of stored entries.

    Parameters
    ----------
    n_components : int
        Embedding dimension.
    max_iter : int
        Number of passes over the stored entries.
    learning_rate : float
        Initial AdaGrad step.
    x_max, alpha : float
        Weighting-function parameters.
    batch_size : int
        Entries per AdaGrad update.
    random_state : int or None
        Seed for initialisation and entry shuffling.
    """

    def __init__(
        self,
        n_components: int = 100,
        max_iter: int = 50,
        learning_rate: float = 0.05,
        x_max: float = 100.0,
        alpha: float = 0.75,
        batch_size: int = 64,
        random_state: int | None = None,
    ):
        self.n_components = n_components
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.x_max = x_max
        self.alpha = alpha
        self.batch_size = batch_size
        self.random_state = random_state

    def _loss(self, E, b, i, j, logx, w):
        diff = np.einsum("kd,kd->k", E[i], E[j]) + b[i] + b[j] - logx
        # each stored pair stands for both (i, j) and (j, i)
        return 2.0 * float(np.sum(w * diff * diff))

    def fit(self, X: SparseCooccurrence, y=None):
        if len(X) == 0:
            raise ValueError("co-occurrence matrix has no entries")
        m = self.n_components
        rng = np.random.default_rng(self.random_state)
        E = rng.uniform(-0.5 / m, 0.5 / m, size=(X.dim, m))
        b = np.zeros(X.dim)
        gsq_E = np.ones_like(E)
        gsq_b = np.ones_like(b)
        rows, cols = X.rows, X.cols
        logx = np.log(X.values)
        w = glove_weight(X.values, self.x_max, self.alpha)

        history = [self._loss(E, b, rows, cols, logx, w)]
        for epoch in range(self.max_iter):
            order = rng.permutation(len(rows))
            for start in range(0, len(order), self.batch_size):
                sel = order[start:start + self.batch_size]
                i, j = rows[sel], cols[sel]
                ei, ej = E[i], E[j]
                diff = np.einsum("kd,kd->k", ei, ej) + b[i] + b[j] - logx[sel]
                coef = 4.0 * w[sel] * diff
                touched, inv = np.unique(np.concatenate([i, j]), return_inverse=True)
                gE = np.zeros((len(touched), m))
                gb = np.zeros(len(touched))
                both = np.concatenate([coef, coef])
                np.add.at(gE, inv, both[:, None] * np.concatenate([ej, ei]))
                np.add.at(gb, inv, both)
                gsq_E[touched] += gE * gE
                gsq_b[touched] += gb * gb
                E[touched] -= self.learning_rate * gE / np.sqrt(gsq_E[touched])
                b[touched] -= self.learning_rate * gb / np.sqrt(gsq_b[touched])
            loss = self._loss(E, b, rows, cols, logx, w)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"GloVe loss became non-finite at epoch {epoch + 1}; "
                    f"try a smaller learning_rate (currently {self.learning_rate})"
                )
            history.append(loss)

        self.embedding_ = E
        self.bias_ = b
        self.loss_history_ = history
        return self

    def transform(self, X=None):
        check_is_fitted(self, "embedding_")
        return self.embedding_


def glove_fit(
    M: SparseCooccurrence,
    m: int,
    iters: int = 50,
    lr: float = 0.05,
    seed: int | None = 0,
    **kwargs,
) -> BasicEmbeddings:
    model = GloVe(n_components=m, max_iter=iters, learning_rate=lr, random_state=seed, **kwargs).fit(M)
    return BasicEmbeddings(model.embedding_, model.bias_)


def glove_fit_leaf_only(
    records: Iterable[PatientRecord],
    num_codes: int,
    m: int,
    iters: int = 50,
    lr: float = 0.05,
    seed: int | None = 0,
    **kwargs,
) -> BasicEmbeddings:
    """GloVe on raw-visit co-occurrence, no ancestor augmentation."""
    M = build_cooccurrence(records, None, num_codes)
    return glove_fit(M, m, iters=iters, lr=lr, seed=seed, **kwargs)
