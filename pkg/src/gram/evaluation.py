"""Accuracy@k with frequency-quintile binning, AUC, and exporters."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import model as M
from .training import encode, predict_proba, spec_from_state

DEFAULT_KS = (5, 10, 20, 30)
NUM_BINS = 5


def accuracy_at_k(scores: Sequence[np.ndarray], labels: Sequence[Sequence[int]], k: int, num_labels: int | None = None):
    """Per-label hit and trial counts.

    Every (step, true label) pair is one trial; it is a hit when the label is
    among the ``k`` highest scores of that step. Equal scores rank by
    ascending label index.

    Returns:
        ``(hits, trials)`` integer arrays of length ``num_labels``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    L = num_labels if num_labels is not None else (len(scores[0]) if len(scores) else 0)
    if k > L:
        raise ValueError(f"k={k} exceeds the number of labels ({L})")
    hits = np.zeros(L, dtype=np.int64)
    trials = np.zeros(L, dtype=np.int64)
    for s, true in zip(scores, labels):
        true = list(true)
        if not true:
            continue
        top = np.argsort(-np.asarray(s), kind="stable")[:k]
        trials[true] += 1
        hits[np.intersect1d(true, top)] += 1
    return hits, trials


def bin_sizes(n: int, num_bins: int = NUM_BINS) -> list[int]:
    base, extra = divmod(n, num_bins)
    return [base + (1 if i < extra else 0) for i in range(num_bins)]


def percentile_bins(hits: np.ndarray, trials: np.ndarray, frequencies: np.ndarray, num_bins: int = NUM_BINS):
    """Mean per-label accuracy within training-frequency quintiles.

    Labels without trials are left out. The rest are ordered by training
    frequency (ties by label id) and cut into ``num_bins`` contiguous bins of
    equal size, earlier bins taking the remainder; the first bin is the
    rarest.

    Returns:
        ``(means, members)``: one mean per bin and the label ids in each.
    """
    labels = np.flatnonzero(trials > 0)
    if len(labels) < num_bins:
        raise ValueError(f"need at least {num_bins} labels with trials, got {len(labels)}")
    order = labels[np.lexsort((labels, frequencies[labels]))]
    acc = hits / np.maximum(trials, 1)
    means, members = [], []
    start = 0
    for size in bin_sizes(len(order), num_bins):
        chunk = order[start:start + size]
        start += size
        members.append(chunk)
        means.append(float(np.mean(acc[chunk])))
    return means, members


def auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    accuracy_at_k: dict[int, float] = field(default_factory=dict)
    bins: dict[int, list[float]] = field(default_factory=dict)
    bin_sizes: list[int] = field(default_factory=list)
    auc: float | None = None
    label_detail: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy_at_k": {str(k): v for k, v in self.accuracy_at_k.items()},
            "bins": {str(k): v for k, v in self.bins.items()},
            "bin_sizes": self.bin_sizes,
            "auc": self.auc,
            "label_detail": self.label_detail,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def sequential_report(
    scores: Sequence[np.ndarray],
    labels: Sequence[Sequence[int]],
    frequencies: np.ndarray,
    ks: Sequence[int] = DEFAULT_KS,
    label_names: Sequence[str] | None = None,
) -> EvalReport:
    """Accuracy@k overall and per frequency bin for flattened prediction steps."""
    L = len(frequencies)
    report = EvalReport()
    per_k = {}
    for k in ks:
        hits, trials = accuracy_at_k(scores, labels, k, L)
        per_k[k] = hits
        seen = trials > 0
        report.accuracy_at_k[k] = float(np.mean(hits[seen] / trials[seen])) if seen.any() else float("nan")
        means, members = percentile_bins(hits, trials, frequencies)
        report.bins[k] = means
        report.bin_sizes = [len(m) for m in members]
    for label in range(L):
        if trials[label] == 0:
            continue
        report.label_detail.append(
            {
                "label": label,
                "name": label_names[label] if label_names is not None else str(label),
                "train_frequency": int(frequencies[label]),
                "trials": int(trials[label]),
                "hits": {str(k): int(per_k[k][label]) for k in ks},
            }
        )
    return report


def binary_report(scores, labels) -> EvalReport:
    return EvalReport(auc=auc(scores, labels))


def export_embeddings(
    state: M.ModelState,
    path: str | os.PathLike,
    categories: dict[str, str] | None = None,
) -> int:
    """Write one TSV row per input code: name, category, final representation."""
    G = M.embedding_matrix(state).T
    names = state.meta.get("input_names") or [str(i) for i in range(len(G))]
    categories = categories or {}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, row in zip(names, G):
            coords = "\t".join(repr(float(x)) for x in row)
            fh.write(f"{name}\t{categories.get(name, '')}\t{coords}\n")
    return len(G)


def export_attention(
    state: M.ModelState,
    leaves: Sequence[str] | None = None,
    drop_root: bool = False,
) -> list[dict]:
    """Attention distribution per selected leaf, self first.

    With ``drop_root`` the root entry is removed from ``nodes``; the other
    weights are left as they are and the removed mass is reported as
    ``residual``.
    """
    alpha = M.attention_matrix(state)
    names = state.meta["node_names"]
    leaf_names = state.meta["input_names"]
    index = {n: i for i, n in enumerate(leaf_names)}
    root = len(names) - 1
    selected = leaf_names if leaves is None else leaves
    out = []
    for name in selected:
        if name not in index:
            raise KeyError(f"unknown leaf {name!r}")
        i = index[name]
        nodes = []
        residual = 0.0
        for j, a, ok in zip(state.ancestors[i], alpha[i], state.ancestor_mask[i]):
            if not ok:
                continue
            if drop_root and j == root:
                residual += float(a)
                continue
            nodes.append({"name": names[j], "weight": float(a)})
        entry = {"leaf": name, "nodes": nodes}
        if drop_root:
            entry["residual"] = residual
        out.append(entry)
    return out


def evaluate_state(
    state: M.ModelState,
    records,
    gm=None,
    frequencies: np.ndarray | None = None,
    flags: dict[str, int] | None = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    """Score a trained model on ``records``.

    Sequential task: Accuracy@k binned by ``frequencies`` (training-split
    label counts). Binary task: AUC against ``flags``.
    """
    spec = spec_from_state(state)
    data = encode(records, spec, gm, state.task, flags)
    n_out = state.params["W_out"].shape[0]
    probs = predict_proba(state, data, n_out)
    if state.task == "binary":
        return binary_report(probs, data.targets)
    scores, labels = [], []
    for p, targets in zip(probs, data.targets):
        scores.extend(p)
        labels.extend(targets[1:])
    names = gm.names if gm is not None else None
    return sequential_report(scores, labels, np.asarray(frequencies), ks, names)
