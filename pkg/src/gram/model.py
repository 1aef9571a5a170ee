"""Attention-over-ancestors embeddings feeding a GRU predictor.

Everything here is plain numpy in float64 with hand-written gradients.
Parameter names used throughout:

    E                    basic embeddings, one row per node (or per input code)
    W_a, b_a, u_a        compatibility MLP, ``u_a . tanh(W_a [e_i; e_j] + b_a)``
    W_z, U_z, b_z        GRU update gate
    W_r, U_r, b_r        GRU reset gate
    W_h, U_h, b_h        GRU candidate state
    W_out, b_out         output layer

The per-item functions (``compatibility`` .. ``loss``) are direct, unbatched
statements of the model and double as test oracles for the batched
``forward`` / ``backward`` pair used in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROB_EPS = 1e-8
ATTENTION_PARAMS = ("W_a", "b_a", "u_a")
GRU_PARAMS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")
RECURRENT_PARAMS = ("U_z", "U_r", "U_h")
OUTPUT_PARAMS = ("W_out", "b_out")
L2_PARAMS = ("W_a", "u_a", "W_out")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


@dataclass
class ModelState:
    """All trainable arrays plus the structure needed to run them.

    ``ancestors`` is a ``(num_inputs, K)`` index array padded on the right,
    with ``ancestor_mask`` marking real entries; both are ``None`` when the
    model has no attention (``E`` rows are then used directly as input
    embeddings). ``grad_sq`` and ``delta_sq`` are the Adadelta running
    averages, keyed like ``params``.
    """

    params: dict[str, np.ndarray]
    task: str = "sequential"
    ancestors: np.ndarray | None = None
    ancestor_mask: np.ndarray | None = None
    grad_sq: dict[str, np.ndarray] = field(default_factory=dict)
    delta_sq: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def use_attention(self) -> bool:
        return self.ancestors is not None

    @property
    def num_inputs(self) -> int:
        if self.use_attention:
            return self.ancestors.shape[0]
        return self.params["E"].shape[0]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ModelState":
        return ModelState(
            params={k: v.copy() for k, v in self.params.items()},
            task=self.task,
            ancestors=None if self.ancestors is None else self.ancestors.copy(),
            ancestor_mask=None if self.ancestor_mask is None else self.ancestor_mask.copy(),
            grad_sq={k: v.copy() for k, v in self.grad_sq.items()},
            delta_sq={k: v.copy() for k, v in self.delta_sq.items()},
            epoch=self.epoch,
            seed=self.seed,
            meta=dict(self.meta),
        )


def pad_ancestors(amap: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad ancestor lists into an index array and a validity mask."""
    width = max(len(a) for a in amap)
    idx = np.zeros((len(amap), width), dtype=np.int64)
    mask = np.zeros((len(amap), width), dtype=bool)
    for i, a in enumerate(amap):
        idx[i, : len(a)] = a
        idx[i, len(a):] = a[0]
        mask[i, : len(a)] = True
    return idx, mask


def _glorot(rng, shape):
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_state(
    *,
    num_nodes: int,
    embedding_dim: int,
    hidden_dim: int,
    num_outputs: int,
    attention_dim: int | None = None,
    amap: Sequence[Sequence[int]] | None = None,
    task: str = "sequential",
    embeddings: np.ndarray | None = None,
    seed: int = 0,
) -> ModelState:
    """Randomly initialised model.

    Args:
        num_nodes: rows of ``E``; all DAG nodes for attention models, the
            input vocabulary size otherwise.
        amap: ancestor list per input code (self first). ``None`` disables
            attention.
        embeddings: optional ``(num_nodes, embedding_dim)`` initial ``E``.
    """
    if task not in ("sequential", "binary"):
        raise ValueError(f"unknown task {task!r}")
    if task == "binary" and num_outputs != 1:
        raise ValueError("binary task has a single output")
    m, r = embedding_dim, hidden_dim
    rng = np.random.default_rng(seed)
    p = {}
    if embeddings is not None:
        if embeddings.shape != (num_nodes, m):
            raise ValueError(f"embeddings shape {embeddings.shape} != {(num_nodes, m)}")
        p["E"] = np.array(embeddings, dtype=np.float64)
        rng.uniform(size=(num_nodes, m))  # keep later draws independent of init mode
    else:
        p["E"] = _glorot(rng, (num_nodes, m))
    anc = mask = None
    if amap is not None:
        if attention_dim is None:
            raise ValueError("attention_dim is required with an ancestor map")
        anc, mask = pad_ancestors(amap)
        if anc.max() >= num_nodes:
            raise ValueError("ancestor index exceeds num_nodes")
        p["W_a"] = _glorot(rng, (attention_dim, 2 * m))
        p["b_a"] = np.zeros(attention_dim)
        p["u_a"] = _glorot(rng, (attention_dim, 1))[:, 0]
    for gate in "zrh":
        p[f"W_{gate}"] = _glorot(rng, (r, m))
        p[f"U_{gate}"] = _glorot(rng, (r, r))
        p[f"b_{gate}"] = np.zeros(r)
    p["W_out"] = _glorot(rng, (num_outputs, r))
    p["b_out"] = np.zeros(num_outputs)
    state = ModelState(params=p, task=task, ancestors=anc, ancestor_mask=mask, seed=seed)
    reset_optimizer(state)
    return state


def reset_optimizer(state: ModelState) -> None:
    state.grad_sq = {k: np.zeros_like(v) for k, v in state.params.items()}
    state.delta_sq = {k: np.zeros_like(v) for k, v in state.params.items()}


# ---------------------------------------------------------------------------
# Per-item reference forms
# ---------------------------------------------------------------------------


def compatibility(e_i, e_j, params) -> float:
    """Score of ancestor ``e_j`` for child ``e_i``; concatenation is child first."""
    z = params["W_a"] @ np.concatenate([e_i, e_j]) + params["b_a"]
    return float(params["u_a"] @ np.tanh(z))


def attention_weights(leaf: int, E, params, amap) -> np.ndarray:
    anc = amap[leaf]
    scores = np.array([compatibility(E[leaf], E[j], params) for j in anc])
    return softmax(scores)


def final_representation(leaf: int, E, params, amap) -> np.ndarray:
    alpha = attention_weights(leaf, E, params, amap)
    return alpha @ E[list(amap[leaf])]


def embedding_matrix(state: ModelState) -> np.ndarray:
    """Final representations as columns, shape ``(m, num_inputs)``."""
    if not state.use_attention:
        return state.params["E"].T.copy()
    G, _ = _attention_forward(state.params, state.ancestors, state.ancestor_mask)
    return G.T


def attention_matrix(state: ModelState) -> np.ndarray:
    """Attention weights per input code over its padded ancestor list."""
    if not state.use_attention:
        raise ValueError("model has no attention")
    _, cache = _attention_forward(state.params, state.ancestors, state.ancestor_mask)
    return cache["alpha"]


def visit_representation(x, G) -> np.ndarray:
    """``tanh(G x)`` for a multi-hot visit ``x``."""
    return np.tanh(G @ x)


def gru_step(v, h_prev, params):
    z = sigmoid(params["W_z"] @ v + params["U_z"] @ h_prev + params["b_z"])
    r = sigmoid(params["W_r"] @ v + params["U_r"] @ h_prev + params["b_r"])
    h_cand = np.tanh(params["W_h"] @ v + params["U_h"] @ (r * h_prev) + params["b_h"])
    return (1.0 - z) * h_prev + z * h_cand


def gru_forward(vs, params) -> np.ndarray:
    """Hidden states ``h_1 .. h_T`` from ``h_0 = 0``; rows of the result."""
    h = np.zeros(params["U_z"].shape[0])
    out = []
    for v in vs:
        h = gru_step(np.asarray(v, dtype=np.float64), h, params)
        out.append(h)
    return np.array(out)


def predict(h, params, task: str = "sequential") -> np.ndarray:
    logits = params["W_out"] @ h + params["b_out"]
    if task == "binary":
        return sigmoid(logits)
    return softmax(logits)


def loss(predictions, labels, eps: float = PROB_EPS) -> float:
    """Time-averaged binary cross entropy for one patient.

    ``predictions`` and ``labels`` are ``(T-1, L)`` arrays (or a single step).
    """
    yhat = np.clip(np.atleast_2d(np.asarray(predictions, dtype=np.float64)), eps, 1.0 - eps)
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    ce = y * np.log(yhat) + (1.0 - y) * np.log(1.0 - yhat)
    return float(-ce.sum() / len(yhat))


# ---------------------------------------------------------------------------
# Batched forward / backward
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded mini-batch.

    Attributes:
        X: ``(B, T, C)`` multi-hot inputs, zero past each patient's length.
        lengths: visits per patient.
        Y: sequential task: ``(B, T, L)`` targets where row ``t`` is the label
            set of visit ``t+1``; binary task: ``(B,)`` labels.
    """

    X: np.ndarray
    lengths: np.ndarray
    Y: np.ndarray

    @property
    def size(self) -> int:
        return len(self.lengths)


def _attention_forward(p, anc, mask):
    E = p["E"]
    m = E.shape[1]
    W_left, W_right = p["W_a"][:, :m], p["W_a"][:, m:]
    E_self = E[anc[:, 0]]
    E_anc = E[anc]
    pre = (E_self @ W_left.T)[:, None, :] + E_anc @ W_right.T + p["b_a"]
    hid = np.tanh(pre)
    scores = np.where(mask, hid @ p["u_a"], -np.inf)
    alpha = softmax(scores, axis=1)
    G = np.einsum("ck,ckm->cm", alpha, E_anc)
    return G, {"E_self": E_self, "E_anc": E_anc, "hid": hid, "alpha": alpha}


def _attention_backward(p, anc, cache, dG, grads):
    E = p["E"]
    m = E.shape[1]
    W_left, W_right = p["W_a"][:, :m], p["W_a"][:, m:]
    alpha, E_anc, E_self, hid = cache["alpha"], cache["E_anc"], cache["E_self"], cache["hid"]
    dE = np.zeros_like(E)
    np.add.at(dE, anc, alpha[:, :, None] * dG[:, None, :])
    d_alpha = np.einsum("cm,ckm->ck", dG, E_anc)
    d_scores = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
    grads["u_a"] = np.einsum("ck,ckl->l", d_scores, hid)
    d_pre = d_scores[:, :, None] * p["u_a"] * (1.0 - hid * hid)
    grads["b_a"] = d_pre.sum(axis=(0, 1))
    grads["W_a"] = np.concatenate(
        [
            np.einsum("ckl,cm->lm", d_pre, E_self),
            np.einsum("ckl,ckm->lm", d_pre, E_anc),
        ],
        axis=1,
    )
    np.add.at(dE, anc[:, 0], d_pre.sum(axis=1) @ W_left)
    np.add.at(dE, anc, d_pre @ W_right)
    grads["E"] = dE


def _step_weights(lengths, task):
    B = len(lengths)
    T = int(lengths.max())
    w = np.zeros((B, T))
    if task == "binary":
        w[np.arange(B), lengths - 1] = 1.0 / B
    else:
        t = np.arange(T)[None, :]
        valid = t < (lengths[:, None] - 1)
        w = np.where(valid, 1.0 / ((lengths[:, None] - 1) * B), 0.0)
    return w


def forward(state: ModelState, batch: Batch, dropout_mask=None, l2: float = 0.0, eps: float = PROB_EPS):
    """Batch loss (mean over patients) and the cache needed by ``backward``.

    Args:
        dropout_mask: optional ``(B, T, r)`` multiplier applied to hidden
            states before the output layer (already inverse-scaled).
        l2: coefficient of the squared-norm penalty on ``W_a``, ``u_a`` and
            ``W_out``.

    Returns:
        ``(loss, predictions, cache)``. Predictions are ``(B, T, L)`` for the
        sequential task and ``(B,)`` for the binary task.
    """
    p = state.params
    X, lengths = batch.X, np.asarray(batch.lengths)
    B, T, _ = X.shape
    cache: dict = {"lengths": lengths, "dropout": dropout_mask, "l2": l2, "eps": eps}

    if state.use_attention:
        G, cache["att"] = _attention_forward(p, state.ancestors, state.ancestor_mask)
    else:
        G = p["E"]
    v = np.tanh(X @ G)
    cache["G"], cache["v"] = G, v

    r = p["U_z"].shape[0]
    in_z = v @ p["W_z"].T + p["b_z"]
    in_r = v @ p["W_r"].T + p["b_r"]
    in_h = v @ p["W_h"].T + p["b_h"]
    H = np.zeros((B, T, r))
    Z = np.zeros((B, T, r))
    R = np.zeros((B, T, r))
    HC = np.zeros((B, T, r))
    h = np.zeros((B, r))
    for t in range(T):
        z = sigmoid(in_z[:, t] + h @ p["U_z"].T)
        rr = sigmoid(in_r[:, t] + h @ p["U_r"].T)
        hc = np.tanh(in_h[:, t] + (rr * h) @ p["U_h"].T)
        h = (1.0 - z) * h + z * hc
        H[:, t], Z[:, t], R[:, t], HC[:, t] = h, z, rr, hc
    cache.update(H=H, Z=Z, R=R, HC=HC)

    Hd = H * dropout_mask if dropout_mask is not None else H
    cache["Hd"] = Hd
    w = _step_weights(lengths, state.task)
    cache["w"] = w
    if state.task == "binary":
        last = Hd[np.arange(B), lengths - 1]
        yhat = sigmoid(last @ p["W_out"].T + p["b_out"])[:, 0]
        y = np.asarray(batch.Y, dtype=np.float64)
        yc = np.clip(yhat, eps, 1.0 - eps)
        total = -np.sum((y * np.log(yc) + (1 - y) * np.log(1 - yc)) / B)
    else:
        yhat = softmax(Hd @ p["W_out"].T + p["b_out"], axis=-1)
        y = batch.Y
        yc = np.clip(yhat, eps, 1.0 - eps)
        ce = y * np.log(yc) + (1 - y) * np.log(1 - yc)
        total = -np.sum(w[:, :, None] * ce)
    cache["yhat"], cache["y"] = yhat, y
    if l2:
        total += l2 * sum(np.sum(p[k] * p[k]) for k in L2_PARAMS if k in p)
    return float(total), yhat, cache


def backward(state: ModelState, batch: Batch, cache) -> dict[str, np.ndarray]:
    """Exact gradients of the ``forward`` loss for every entry of ``params``."""
    p = state.params
    X = batch.X
    lengths, eps, w = cache["lengths"], cache["eps"], cache["w"]
    yhat, y = cache["yhat"], cache["y"]
    H, Z, R, HC, Hd, v = cache["H"], cache["Z"], cache["R"], cache["HC"], cache["Hd"], cache["v"]
    B, T, r = H.shape
    grads: dict[str, np.ndarray] = {}

    inside = (yhat > eps) & (yhat < 1.0 - eps)
    yc = np.clip(yhat, eps, 1.0 - eps)
    d_yhat = np.where(inside, -y / yc + (1 - y) / (1 - yc), 0.0)
    dHd = np.zeros_like(H)
    if state.task == "binary":
        d_logit = (d_yhat / B * yhat * (1 - yhat))[:, None]
        last = Hd[np.arange(B), lengths - 1]
        grads["W_out"] = d_logit.T @ last
        grads["b_out"] = d_logit.sum(axis=0)
        dHd[np.arange(B), lengths - 1] = d_logit @ p["W_out"]
    else:
        d_yhat = d_yhat * w[:, :, None]
        d_logits = yhat * (d_yhat - np.sum(d_yhat * yhat, axis=-1, keepdims=True))
        grads["W_out"] = np.einsum("btl,btr->lr", d_logits, Hd)
        grads["b_out"] = d_logits.sum(axis=(0, 1))
        dHd = d_logits @ p["W_out"]
    dH = dHd * cache["dropout"] if cache["dropout"] is not None else dHd

    for k in GRU_PARAMS:
        grads[k] = np.zeros_like(p[k])
    da_z = np.zeros((B, T, r))
    da_r = np.zeros((B, T, r))
    da_h = np.zeros((B, T, r))
    dh_next = np.zeros((B, r))
    zeros = np.zeros((B, r))
    for t in range(T - 1, -1, -1):
        dh = dH[:, t] + dh_next
        h_prev = H[:, t - 1] if t > 0 else zeros
        z, rr, hc = Z[:, t], R[:, t], HC[:, t]
        dz = dh * (hc - h_prev)
        dhc = dh * z
        dh_prev = dh * (1.0 - z)
        dah = dhc * (1.0 - hc * hc)
        grads["U_h"] += dah.T @ (rr * h_prev)
        d_rh = dah @ p["U_h"]
        dh_prev += d_rh * rr
        dar = d_rh * h_prev * rr * (1.0 - rr)
        daz = dz * z * (1.0 - z)
        grads["U_r"] += dar.T @ h_prev
        grads["U_z"] += daz.T @ h_prev
        dh_prev += dar @ p["U_r"] + daz @ p["U_z"]
        da_z[:, t], da_r[:, t], da_h[:, t] = daz, dar, dah
        dh_next = dh_prev
    for gate, da in (("z", da_z), ("r", da_r), ("h", da_h)):
        grads[f"W_{gate}"] = np.einsum("btr,btm->rm", da, v)
        grads[f"b_{gate}"] = da.sum(axis=(0, 1))
    dv = da_z @ p["W_z"] + da_r @ p["W_r"] + da_h @ p["W_h"]
    d_pre_v = dv * (1.0 - v * v)
    dG = np.einsum("btc,btm->cm", X, d_pre_v)

    if state.use_attention:
        _attention_backward(p, state.ancestors, cache["att"], dG, grads)
    else:
        grads["E"] = dG

    l2 = cache["l2"]
    if l2:
        for k in L2_PARAMS:
            if k in p:
                grads[k] = grads[k] + 2.0 * l2 * p[k]
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k}")
    return grads


def adadelta_step(state: ModelState, grads: dict[str, np.ndarray], rho: float = 0.95, eps: float = 1e-6) -> None:
    """In-place Adadelta update of ``state.params`` and its accumulators."""
    for k, g in grads.items():
        acc_g = state.grad_sq[k]
        acc_d = state.delta_sq[k]
        acc_g *= rho
        acc_g += (1.0 - rho) * g * g
        delta = -np.sqrt(acc_d + eps) / np.sqrt(acc_g + eps) * g
        acc_d *= rho
        acc_d += (1.0 - rho) * delta * delta
        state.params[k] += delta


def make_batch(
    inputs: Sequence[Sequence[Sequence[int]]],
    num_inputs: int,
    targets: Sequence | None = None,
    num_outputs: int | None = None,
    task: str = "sequential",
) -> Batch:
    """Pad encoded patients into a ``Batch``.

    Args:
        inputs: per patient, per visit, input-column indices.
        targets: sequential: per patient, per visit, label ids (the entry for
            visit ``t`` is what step ``t-1`` predicts; the first is ignored).
            Binary: one 0/1 label per patient.
    """
    B = len(inputs)
    lengths = np.array([len(p) for p in inputs], dtype=np.int64)
    T = int(lengths.max())
    X = np.zeros((B, T, num_inputs))
    for b, visits in enumerate(inputs):
        for t, codes in enumerate(visits):
            X[b, t, list(codes)] = 1.0
    if task == "binary":
        Y = np.zeros(B) if targets is None else np.asarray(targets, dtype=np.float64)
    else:
        Y = np.zeros((B, T, num_outputs or 1))
        if targets is not None:
            for b, labels in enumerate(targets):
                for t in range(1, len(labels)):
                    Y[b, t - 1, list(labels[t])] = 1.0
    return Batch(X, lengths, Y)
