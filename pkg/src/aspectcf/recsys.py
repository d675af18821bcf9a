"""Black-box scoring network over concatenated user/item aspect vectors.

The model is a fixed three-layer dense network: (2r -> h1) -> ReLU ->
(h1 -> h2) -> ReLU -> (h2 -> 1) -> logistic squash, trained with
cross-entropy on observed interactions plus uniformly sampled negatives.
Everything is plain float64 numpy so that scores, gradients, and
checkpoints are exactly reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .corpus import AspectMatrices

CHECKPOINT_MAGIC = "aspectcf-model"
CHECKPOINT_VERSION = 1

# logistic output clamped into the open interval so the score contract
# 0 < s < 1 survives float saturation on extreme activations
_SCORE_LO = 1e-300
_SCORE_HI = 1.0 - 1e-16


@dataclass
class TrainHyper:
    """Training configuration; defaults follow the reference setup."""

    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 256
    negatives: int = 2          # negatives sampled per positive, each epoch
    hidden: tuple[int, int] = (512, 256)
    seed: int = 0


@dataclass
class RankedList:
    """Top-K items for one user, scores non-increasing, ties by item index.

    Candidates are all items minus the user's training items; the boundary
    score is the (K+1)-th candidate's score.
    """

    user: int
    items: np.ndarray
    scores: np.ndarray
    k: int
    boundary_score: float

    def rank_of(self, item: int) -> int:
        """1-based position of an item; raises if the item is not listed."""
        pos = np.nonzero(self.items == item)[0]
        if len(pos) == 0:
            raise KeyError(f"item {item} not in top-{self.k} of user {self.user}")
        return int(pos[0]) + 1

    def score_of(self, item: int) -> float:
        return float(self.scores[self.rank_of(item) - 1])

    def __contains__(self, item: int) -> bool:
        return bool(np.any(self.items == item))


class RecommenderModel:
    """Three dense layers with rectifier activations and a logistic output."""

    def __init__(self, n_aspects: int, hidden: tuple[int, int] = (512, 256),
                 weights=None, rng: np.random.Generator | None = None):
        self.n_aspects = n_aspects
        dims = [2 * n_aspects, hidden[0], hidden[1], 1]
        self.dims = dims
        if weights is not None:
            self.weights = [np.asarray(w, dtype=np.float64) for w, _ in weights]
            self.biases = [np.asarray(b, dtype=np.float64) for _, b in weights]
            for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
                if w.shape != (dims[layer], dims[layer + 1]) or b.shape != (dims[layer + 1],):
                    raise ValueError(
                        f"layer {layer} shape {w.shape}/{b.shape} inconsistent "
                        f"with dims {dims}")
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.weights, self.biases = [], []
            for fan_in, fan_out in zip(dims, dims[1:]):
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
                self.biases.append(np.zeros(fan_out))
        self.loss_trace: list[float] = []

    # -- forward / gradients -------------------------------------------------

    def _check_vec(self, vec, name):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape[-1] != self.n_aspects:
            raise ValueError(
                f"{name} has length {vec.shape[-1]}, expected {self.n_aspects}")
        return vec

    def _forward_cached(self, inputs: np.ndarray):
        z1 = inputs @ self.weights[0] + self.biases[0]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.weights[1] + self.biases[1]
        a2 = np.maximum(z2, 0.0)
        z3 = a2 @ self.weights[2] + self.biases[2]
        s = np.clip(expit(z3[:, 0]), _SCORE_LO, _SCORE_HI)
        return s, (inputs, z1, a1, z2, a2, z3)

    def _stack_inputs(self, user_vec: np.ndarray, item_mat: np.ndarray) -> np.ndarray:
        item_mat = np.atleast_2d(item_mat)
        inputs = np.empty((item_mat.shape[0], 2 * self.n_aspects))
        inputs[:, :self.n_aspects] = user_vec
        inputs[:, self.n_aspects:] = item_mat
        return inputs

    def score(self, user_vec, item_vec) -> float:
        """Ranking score in (0, 1) for one user/item aspect-vector pair."""
        user_vec = self._check_vec(user_vec, "user vector")
        item_vec = self._check_vec(item_vec, "item vector")
        s, _ = self._forward_cached(self._stack_inputs(user_vec, item_vec))
        return float(s[0])

    def score_items(self, user_vec, item_mat) -> np.ndarray:
        """Scores for one user against a batch of item vectors."""
        user_vec = self._check_vec(user_vec, "user vector")
        item_mat = self._check_vec(item_mat, "item matrix")
        s, _ = self._forward_cached(self._stack_inputs(user_vec, item_mat))
        return s

    def _input_grad(self, cache, s: np.ndarray) -> np.ndarray:
        inputs, z1, _, z2, _, _ = cache
        dz3 = (s * (1.0 - s))[:, None]
        da2 = dz3 @ self.weights[2].T
        dz2 = da2 * (z2 > 0.0)          # rectifier subgradient at 0 taken as 0
        da1 = dz2 @ self.weights[1].T
        dz1 = da1 * (z1 > 0.0)
        return dz1 @ self.weights[0].T

    def score_and_item_grad(self, user_vec, item_mat):
        """Scores plus the exact gradient of each score w.r.t. its item vector."""
        user_vec = self._check_vec(user_vec, "user vector")
        item_mat = self._check_vec(item_mat, "item matrix")
        s, cache = self._forward_cached(self._stack_inputs(user_vec, item_mat))
        grads = self._input_grad(cache, s)[:, self.n_aspects:]
        return s, grads

    def item_gradient(self, user_vec, item_vec) -> np.ndarray:
        """d score / d item-aspect-vector, analytic, length r."""
        _, grads = self.score_and_item_grad(user_vec, np.atleast_2d(item_vec))
        return grads[0]

    # -- training ------------------------------------------------------------

    def _sgd_batch(self, inputs: np.ndarray, labels: np.ndarray, lr: float) -> float:
        s, cache = self._forward_cached(inputs)
        _, z1, a1, z2, a2, z3 = cache
        z = z3[:, 0]
        # per-sample cross-entropy, computed stably from the logit
        loss_sum = float(np.sum(np.logaddexp(0.0, z) - labels * z))

        b = inputs.shape[0]
        dz3 = ((expit(z) - labels) / b)[:, None]
        gw3 = a2.T @ dz3
        gb3 = dz3.sum(axis=0)
        da2 = dz3 @ self.weights[2].T
        dz2 = da2 * (z2 > 0.0)
        gw2 = a1.T @ dz2
        gb2 = dz2.sum(axis=0)
        da1 = dz2 @ self.weights[1].T
        dz1 = da1 * (z1 > 0.0)
        gw1 = inputs.T @ dz1
        gb1 = dz1.sum(axis=0)

        for w, g in zip(self.weights, (gw1, gw2, gw3)):
            w -= lr * g
        for bvec, g in zip(self.biases, (gb1, gb2, gb3)):
            bvec -= lr * g
        return loss_sum

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | os.PathLike, config_hash: str | None = None) -> None:
        """Write a checkpoint that round-trips weights bit-exactly (json
        floats use shortest round-trip repr)."""
        payload = {
            "magic": CHECKPOINT_MAGIC,
            "format_version": CHECKPOINT_VERSION,
            "n_aspects": self.n_aspects,
            "dims": self.dims,
            "config_hash": config_hash,
            "loss_trace": self.loss_trace,
            "layers": [
                {"w": w.tolist(), "b": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RecommenderModel":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a recommender checkpoint")
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version")
        dims = payload["dims"]
        model = cls(
            n_aspects=payload["n_aspects"],
            hidden=(dims[1], dims[2]),
            weights=[(np.array(layer["w"]), np.array(layer["b"]))
                     for layer in payload["layers"]])
        model.loss_trace = list(payload.get("loss_trace", []))
        model.config_hash = payload.get("config_hash")
        return model


def _sample_negatives(rng: np.random.Generator, n_items: int,
                      train_sets: list[set[int]], pos_users: np.ndarray,
                      per_positive: int) -> np.ndarray:
    negs = np.empty(len(pos_users) * per_positive, dtype=np.int64)
    idx = 0
    for user in pos_users:
        interacted = train_sets[user]
        for _ in range(per_positive):
            j = int(rng.integers(0, n_items))
            while j in interacted:
                j = int(rng.integers(0, n_items))
            negs[idx] = j
            idx += 1
    return negs


def train_model(matrices: AspectMatrices, hyper: TrainHyper) -> RecommenderModel:
    """Fit the scoring network by minibatch SGD on cross-entropy.

    Each epoch pairs every training interaction with freshly sampled
    negatives (uniform over the user's non-interacted items) at the
    configured ratio, shuffles, and sweeps minibatches. Deterministic for a
    fixed seed; the per-epoch mean loss is recorded on ``loss_trace``.
    """
    coo = matrices.B.tocoo()
    if coo.nnz == 0:
        raise ValueError("cannot train: no positive interactions")
    order = np.lexsort((coo.col, coo.row))
    pos_users = coo.row[order].astype(np.int64)
    pos_items = coo.col[order].astype(np.int64)
    train_sets = [set(map(int, matrices.train_items(u))) for u in range(matrices.m)]

    rng = np.random.default_rng(hyper.seed)
    model = RecommenderModel(matrices.r, hyper.hidden, rng=rng)

    n_pos = len(pos_users)
    for _ in range(hyper.epochs):
        negs = _sample_negatives(rng, matrices.n, train_sets, pos_users,
                                 hyper.negatives)
        users = np.concatenate([pos_users, np.repeat(pos_users, hyper.negatives)])
        items = np.concatenate([pos_items, negs])
        labels = np.concatenate([np.ones(n_pos), np.zeros(len(negs))])

        perm = rng.permutation(len(users))
        total = 0.0
        for start in range(0, len(perm), hyper.batch_size):
            batch = perm[start:start + hyper.batch_size]
            inputs = np.hstack([matrices.X[users[batch]], matrices.Y[items[batch]]])
            total += model._sgd_batch(inputs, labels[batch], hyper.learning_rate)
        model.loss_trace.append(total / len(users))
    return model


def recommend_top_k(model: RecommenderModel, matrices: AspectMatrices,
                    user: int, k: int,
                    item_matrix: np.ndarray | None = None) -> RankedList:
    """Rank every candidate item (catalog minus the user's training items)
    and return the top k plus the (k+1)-th boundary score.

    ``item_matrix`` substitutes a counterfactual Y of the same shape.
    """
    y = matrices.Y if item_matrix is None else item_matrix
    candidates = np.setdiff1d(np.arange(matrices.n), matrices.train_items(user))
    if len(candidates) < k + 1:
        raise ValueError(
            f"user {user}: {len(candidates)} candidates but top-{k} needs "
            f"{k + 1} (boundary undefined)")
    scores = model.score_items(matrices.X[user], y[candidates])
    order = np.lexsort((candidates, -scores))
    top = order[:k]
    return RankedList(
        user=user,
        items=candidates[top].copy(),
        scores=scores[top].copy(),
        k=k,
        boundary_score=float(scores[order[k]]))
