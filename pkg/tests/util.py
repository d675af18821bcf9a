"""Shared builders for small test instances."""

import numpy as np
import scipy.sparse as sp
from scipy.special import logit

from aspectcf.corpus import AspectMatrices
from aspectcf.recsys import RecommenderModel


class LinearScorer:
    """Dot-product scorer with the same duck-typed surface as the network."""

    def score(self, user_vec, item_vec):
        return float(np.dot(user_vec, item_vec))

    def score_items(self, user_vec, item_mat):
        return np.atleast_2d(item_mat) @ np.asarray(user_vec, dtype=float)

    def score_and_item_grad(self, user_vec, item_mat):
        item_mat = np.atleast_2d(item_mat)
        user_vec = np.asarray(user_vec, dtype=float)
        return item_mat @ user_vec, np.tile(user_vec, (item_mat.shape[0], 1))


def fig1_instance():
    """The phone-shopping toy: user cares (4, 5, 3) about (screen, battery,
    price); the recommended phone is (4.5, 3, 3) scoring 42 and the
    runner-up scores 37.5, so lowering battery from 3 to 2.1 flips the
    decision."""
    from aspectcf.recsys import RankedList

    X = np.array([[4.0, 5.0, 3.0]])
    Y = np.array([[4.5, 3.0, 3.0], [3.0, 3.3, 3.0]])
    mats = AspectMatrices(X=X, Y=Y, B=sp.csr_matrix((1, 2), dtype=np.int8))
    ranked = RankedList(user=0, items=np.array([0]), scores=np.array([42.0]),
                        k=1, boundary_score=37.5)
    return LinearScorer(), mats, ranked


def tempered_random_model(rng, r, mats, hidden=(16, 8), scale=0.5,
                          max_logit=2.2):
    """Random network whose logits over the instance are centered and capped,
    keeping every score in the responsive part of the logistic curve."""
    dims = [2 * r, hidden[0], hidden[1], 1]
    weights = [(rng.normal(0, scale, size=(a, b)), rng.normal(0, 0.2, size=b))
               for a, b in zip(dims, dims[1:])]
    model = RecommenderModel(r, hidden, weights=weights)
    logits = np.concatenate([logit(model.score_items(mats.X[u], mats.Y))
                             for u in range(mats.m)])
    center = float(np.median(logits))
    model.biases[2][0] -= center
    c = max_logit / float(np.max(np.abs(logits - center)))
    model.weights[2] *= c
    model.biases[2][0] *= c
    return model


def random_aspect_vec(rng, r, density=0.7):
    vals = rng.uniform(1.0, 5.0, size=r)
    mask = rng.random(r) < density
    return np.where(mask, vals, 0.0)


def random_matrices(rng, m, n, r, density=0.2):
    X = np.vstack([random_aspect_vec(rng, r) for _ in range(m)])
    Y = np.vstack([random_aspect_vec(rng, r) for _ in range(n)])
    B = sp.random(m, n, density=density, random_state=np.random.RandomState(0),
                  dtype=np.int8, data_rvs=lambda k: np.ones(k, dtype=np.int8)).tocsr()
    return AspectMatrices(X=X, Y=Y, B=B)


def planted_matrices(seed, m=20, n=50, r=8, per_user=3, per_item=3,
                     pos_per_user=10):
    """Learnable instance: positives only where user/item aspect sets overlap."""
    rng = np.random.default_rng(seed)
    pref = [rng.choice(r, per_user, replace=False) for _ in range(m)]
    qual = [rng.choice(r, per_item, replace=False) for _ in range(n)]
    X = np.zeros((m, r))
    Y = np.zeros((n, r))
    for u in range(m):
        X[u, pref[u]] = rng.uniform(3.0, 4.8, per_user)
    for j in range(n):
        Y[j, qual[j]] = rng.uniform(3.0, 4.8, per_item)
    rows, cols = [], []
    for u in range(m):
        overlap = [j for j in range(n) if set(pref[u]) & set(qual[j])]
        chosen = rng.choice(overlap, min(pos_per_user, len(overlap)),
                            replace=False)
        rows += [u] * len(chosen)
        cols += list(chosen)
    B = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)),
                      shape=(m, n))
    return AspectMatrices(X=X, Y=Y, B=B)
