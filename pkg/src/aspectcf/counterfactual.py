"""Counterfactual explanation search over item aspect vectors.

For a recommended (user, item) pair, find a non-positive change vector
applied to the item's aspect-quality row that pushes the item's score below
the top-K boundary. The relaxed objective is

    ||Delta||_2^2 + gamma * ||Delta||_1 + lam * max(0, alpha + s(Y_j + Delta) - bound)

minimized by fixed-step projected gradient descent: the l1 term is handled
by soft-thresholding, the non-positive orthant by clipping after every
step. The result is only reported valid after an explicit re-score check,
performed again after small entries are thresholded to zero.

Any scoring object with ``score(user_vec, item_vec)`` and
``score_and_item_grad(user_vec, item_matrix)`` can be explained; it is
treated as a black box.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import AspectMatrices, Corpus
from .recsys import RankedList

VARIANT_MULTI = "multi"
VARIANT_SINGLE = "single"
VARIANT_MASKED_MULTI = "masked-multi"
VARIANT_MASKED_SINGLE = "masked-single"
VARIANTS = (VARIANT_MULTI, VARIANT_SINGLE, VARIANT_MASKED_MULTI,
            VARIANT_MASKED_SINGLE)


@dataclass
class CfHyper:
    """Optimization weights and optimizer settings for explanation search."""

    lam: float = 100.0      # hinge weight
    gamma: float = 1.0      # l1 weight
    alpha: float = 0.2      # hinge margin
    tau: float = 1e-4       # |delta| <= tau counts as zero
    step: float = 0.01      # gradient step size
    max_iter: int = 1000
    tol: float = 1e-6       # stop when the step changes delta less than this

    def __post_init__(self):
        for name in ("lam", "gamma", "alpha", "tau", "step", "tol"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class ChangeVector:
    """Non-positive per-aspect perturbation with a zero threshold.

    Entries with magnitude at most ``tau`` count as exactly zero for the
    aspect set and the l0 norm.
    """

    values: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values > 0):
            raise ValueError("change vector entries must be non-positive")

    def thresholded(self) -> np.ndarray:
        return np.where(np.abs(self.values) <= self.tau, 0.0, self.values)

    def aspect_indices(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.nonzero(self.thresholded())[0])

    def l0(self) -> int:
        return len(self.aspect_indices())

    def complexity(self, gamma: float) -> float:
        return complexity(self.thresholded(), gamma, tau=0.0)


@dataclass
class Explanation:
    """One counterfactual explanation attempt for a recommended pair."""

    user: int
    item: int
    variant: str
    delta: ChangeVector
    aspects: tuple[int, ...]
    complexity: float
    strength: float
    epsilon: float
    valid: bool
    rank: int
    degenerate: bool = False

    @property
    def aspect_count(self) -> int:
        return len(self.aspects)


def complexity(delta, gamma: float, tau: float = 0.0) -> float:
    """||Delta||_2^2 + gamma * ||Delta||_0 with the tau-thresholded zero count."""
    delta = np.asarray(delta, dtype=np.float64)
    l0 = int(np.count_nonzero(np.abs(delta) > tau))
    return float(np.sum(delta ** 2)) + gamma * l0


def strength(user: int, item: int, delta, model,
             matrices: AspectMatrices) -> float:
    """Drop of the item's ranking score when delta is applied to its row."""
    delta = np.asarray(delta, dtype=np.float64)
    base = model.score(matrices.X[user], matrices.Y[item])
    moved = model.score(matrices.X[user], matrices.Y[item] + delta)
    return base - moved


def margin(user: int, item: int, ranked: RankedList) -> float:
    """Score gap between the item and the (K+1)-th candidate; zero means a
    degenerate tie at the boundary."""
    if ranked.user != user:
        raise ValueError(f"ranked list belongs to user {ranked.user}, not {user}")
    return ranked.score_of(item) - ranked.boundary_score


def _resolve_mask(mask, r: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (r,):
        raise ValueError(f"mask has shape {mask.shape}, expected ({r},)")
    return (mask != 0).astype(np.float64)


def _check_finite(score_val, delta) -> None:
    if not np.isfinite(score_val) or not np.all(np.isfinite(delta)):
        raise FloatingPointError("non-finite loss during explanation search")


def _finish(user, item, variant, delta, model, matrices, ranked, hyper,
            eps) -> Explanation:
    """Shared post-process: threshold, re-score, and verify the flip."""
    change = ChangeVector(delta, tau=hyper.tau)
    final = change.thresholded()
    aspects = change.aspect_indices()
    rescored = model.score(matrices.X[user], matrices.Y[item] + final)
    valid = bool(rescored <= ranked.boundary_score) and len(aspects) > 0
    return Explanation(
        user=user, item=item, variant=variant,
        delta=ChangeVector(final, tau=hyper.tau),
        aspects=aspects,
        complexity=change.complexity(hyper.gamma),
        strength=strength(user, item, final, model, matrices),
        epsilon=eps, valid=valid, rank=ranked.rank_of(item),
        degenerate=(eps == 0.0))


def explain_multi(user: int, item: int, model, matrices: AspectMatrices,
                  ranked: RankedList, hyper: CfHyper,
                  mask=None) -> Explanation:
    """Multi-aspect explanation by proximal projected gradient descent.

    Delta starts at zero and is updated with a fixed step: gradient of the
    squared-norm plus (when the hinge is active) the hinge pull through the
    model's item gradient, then soft-thresholding for the l1 term, then
    projection onto the non-positive orthant. A mask freezes excluded
    aspects at zero.
    """
    eps = margin(user, item, ranked)
    r = matrices.r
    mask = _resolve_mask(mask, r)
    variant = VARIANT_MULTI if mask is None else VARIANT_MASKED_MULTI
    if mask is not None and not mask.any():
        return _finish(user, item, variant, np.zeros(r), model, matrices,
                       ranked, hyper, eps)

    user_vec = matrices.X[user]
    item_vec = matrices.Y[item]
    bound = ranked.boundary_score
    delta = np.zeros(r)
    for _ in range(hyper.max_iter):
        scores, grads = model.score_and_item_grad(
            user_vec, (item_vec + delta)[None, :])
        s = float(scores[0])
        _check_finite(s, delta)
        grad = 2.0 * delta
        if hyper.alpha + s - bound > 0.0:
            grad = grad + hyper.lam * grads[0]
        if mask is not None:
            grad = grad * mask
        shifted = delta - hyper.step * grad
        prox = np.sign(shifted) * np.maximum(
            np.abs(shifted) - hyper.step * hyper.gamma, 0.0)
        new_delta = np.minimum(prox, 0.0)
        if mask is not None:
            new_delta = new_delta * mask
        moved = float(np.max(np.abs(new_delta - delta)))
        delta = new_delta
        if moved < hyper.tol:
            break
    _check_finite(0.0, delta)
    return _finish(user, item, variant, delta, model, matrices, ranked,
                   hyper, eps)


def explain_single(user: int, item: int, model, matrices: AspectMatrices,
                   ranked: RankedList, hyper: CfHyper,
                   mask=None) -> Explanation:
    """Single-aspect explanation by exhaustive per-aspect scalar search.

    Every aspect on which the item has a nonzero quality entry gets its own
    scalar problem, minimizing delta^2 plus the hinge term over delta <= 0
    (no l1 term: the aspect count is fixed at one). All scalar descents run
    as one batch. Aspects whose optimum survives the re-score check compete
    on squared magnitude; ties go to the lowest aspect index.
    """
    eps = margin(user, item, ranked)
    r = matrices.r
    mask = _resolve_mask(mask, r)
    variant = VARIANT_SINGLE if mask is None else VARIANT_MASKED_SINGLE

    item_vec = matrices.Y[item]
    candidates = np.nonzero(item_vec)[0]
    if mask is not None:
        candidates = candidates[mask[candidates] != 0]
    if len(candidates) == 0:
        return _finish(user, item, variant, np.zeros(r), model, matrices,
                       ranked, hyper, eps)

    user_vec = matrices.X[user]
    bound = ranked.boundary_score
    c = len(candidates)
    deltas = np.zeros(c)
    probes = np.tile(item_vec, (c, 1))
    rows = np.arange(c)
    for _ in range(hyper.max_iter):
        scores, grads = model.score_and_item_grad(user_vec, probes)
        _check_finite(float(np.sum(scores)), deltas)
        own_grad = grads[rows, candidates]
        active = (hyper.alpha + scores - bound) > 0.0
        grad = 2.0 * deltas + hyper.lam * own_grad * active
        new_deltas = np.minimum(deltas - hyper.step * grad, 0.0)
        moved = float(np.max(np.abs(new_deltas - deltas)))
        deltas = new_deltas
        probes[rows, candidates] = item_vec[candidates] + deltas
        if moved < hyper.tol:
            break

    # verify each candidate's thresholded optimum independently
    deltas = np.where(np.abs(deltas) <= hyper.tau, 0.0, deltas)
    probes[rows, candidates] = item_vec[candidates] + deltas
    final_scores = model.score_items(user_vec, probes)
    flips = (final_scores <= bound) & (deltas != 0.0)
    best_delta = np.zeros(r)
    if flips.any():
        flip_rows = rows[flips]
        winner = flip_rows[np.argmin(deltas[flip_rows] ** 2)]
        best_delta[candidates[winner]] = deltas[winner]
    return _finish(user, item, variant, best_delta, model, matrices, ranked,
                   hyper, eps)


def preference_mask(matrices: AspectMatrices, user: int) -> np.ndarray:
    """Indicator of the aspects the user mentioned in training reviews."""
    return (matrices.X[user] != 0).astype(np.float64)


def explain_masked(user: int, item: int, model, matrices: AspectMatrices,
                   ranked: RankedList, hyper: CfHyper,
                   variant: str = VARIANT_MULTI,
                   mask=None) -> Explanation:
    """Masked explanation restricted to the user's preference space.

    The mask defaults to the indicator of the user's nonzero entries in X;
    excluded aspects never receive gradient and never enter the aspect set.
    """
    if mask is None:
        mask = preference_mask(matrices, user)
    base = variant.removeprefix("masked-")
    if base == VARIANT_MULTI:
        return explain_multi(user, item, model, matrices, ranked, hyper, mask=mask)
    if base == VARIANT_SINGLE:
        return explain_single(user, item, model, matrices, ranked, hyper, mask=mask)
    raise ValueError(f"unknown variant {variant!r}")


def explain(user: int, item: int, model, matrices: AspectMatrices,
            ranked: RankedList, hyper: CfHyper, variant: str) -> Explanation:
    """Dispatch one explanation attempt by variant tag."""
    if variant == VARIANT_MULTI:
        return explain_multi(user, item, model, matrices, ranked, hyper)
    if variant == VARIANT_SINGLE:
        return explain_single(user, item, model, matrices, ranked, hyper)
    if variant in (VARIANT_MASKED_MULTI, VARIANT_MASKED_SINGLE):
        return explain_masked(user, item, model, matrices, ranked, hyper,
                              variant=variant)
    raise ValueError(f"unknown variant {variant!r}")


# -- line-delimited persistence ----------------------------------------------

def write_explanations(explanations, corpus: Corpus,
                       path: str | os.PathLike,
                       config_hash: str | None = None) -> None:
    """Write explanations as JSON lines; the first line is a meta record."""
    with open(path, "w", encoding="utf-8") as fh:
        meta = {"meta": "aspectcf-explanations", "config_hash": config_hash}
        fh.write(json.dumps(meta) + "\n")
        for e in explanations:
            record = {
                "user_id": corpus.user_ids[e.user],
                "item_id": corpus.item_ids[e.item],
                "variant": e.variant,
                "aspects": [corpus.catalog.names[k] for k in e.aspects],
                "deltas": [float(e.delta.thresholded()[k]) for k in e.aspects],
                "complexity": e.complexity,
                "strength": e.strength,
                "epsilon": e.epsilon,
                "valid": e.valid,
                "rank": e.rank,
                "degenerate": e.degenerate,
            }
            fh.write(json.dumps(record) + "\n")


def read_explanations(path: str | os.PathLike, corpus: Corpus,
                      tau: float = 0.0):
    """Read explanations back; returns (meta dict, list of Explanation)."""
    user_index = {ident: i for i, ident in enumerate(corpus.user_ids)}
    item_index = {ident: i for i, ident in enumerate(corpus.item_ids)}
    explanations = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            return {"meta": None}, []
        meta = json.loads(header)
        if meta.get("meta") != "aspectcf-explanations":
            raise ValueError(f"{path}: not an explanation file")
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            values = np.zeros(corpus.r)
            aspects = tuple(corpus.catalog.index(a) for a in rec["aspects"])
            for k, v in zip(aspects, rec["deltas"]):
                values[k] = v
            explanations.append(Explanation(
                user=user_index[rec["user_id"]],
                item=item_index[rec["item_id"]],
                variant=rec["variant"],
                delta=ChangeVector(values, tau=tau),
                aspects=aspects,
                complexity=rec["complexity"],
                strength=rec["strength"],
                epsilon=rec["epsilon"],
                valid=rec["valid"],
                rank=rec["rank"],
                degenerate=rec.get("degenerate", False)))
    return meta, explanations
