"""Quantitative evaluation of explanation batches.

User-oriented metrics compare the explanation's aspect set against the
aspects the user actually praised in the held-out review of the same item.
Model-oriented metrics re-run the recommender in two counterfactual worlds
per explanation: one where the explanation's aspects are removed from every
item (necessity) and one where only those aspects remain (sufficiency).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import AspectMatrices, Corpus, HoldoutSplit
from .counterfactual import ChangeVector, Explanation, complexity
from .recsys import RankedList, RecommenderModel, recommend_top_k

RANDOM_VARIANT = "random"


@dataclass
class GroundTruthVector:
    """Aspects the user mentioned with positive sentiment in the held-out
    review of this item."""

    user: int
    item: int
    aspects: np.ndarray  # bool, length r

    @property
    def empty(self) -> bool:
        return not bool(self.aspects.any())


def ground_truth(corpus: Corpus, split: HoldoutSplit) -> dict:
    """Positive-sentiment aspect vectors for every test-split pair."""
    test_sets = [set(items) for items in split.test_items]
    out = {}
    for rec in corpus.records:
        if rec.item not in test_sets[rec.user]:
            continue
        vec = np.zeros(corpus.r, dtype=bool)
        for aspect, sentiment in rec.mentions:
            if sentiment > 0:
                vec[aspect] = True
        out[(rec.user, rec.item)] = GroundTruthVector(rec.user, rec.item, vec)
    return out


def fidelity(explanations) -> float:
    """Fraction of attempted explanations that are valid."""
    explanations = list(explanations)
    if not explanations:
        raise ValueError("fidelity of an empty batch is undefined")
    return sum(e.valid for e in explanations) / len(explanations)


@dataclass
class UserOrientedScores:
    precision: float | None
    recall: float | None
    f1: float | None
    n_pairs: int

    @property
    def applicable(self) -> bool:
        return self.n_pairs > 0


def user_oriented(explanations, truth: dict) -> UserOrientedScores:
    """Mean per-pair precision/recall/F1 against review ground truth.

    Only pairs that are in the test set, have a valid explanation, and have
    at least one positively-mentioned aspect participate.
    """
    precisions, recalls, f1s = [], [], []
    for e in explanations:
        gt = truth.get((e.user, e.item))
        if gt is None or gt.empty or not e.valid or not e.aspects:
            continue
        chosen = set(e.aspects)
        liked = set(int(k) for k in np.nonzero(gt.aspects)[0])
        hit = len(chosen & liked)
        p = hit / len(chosen)
        r = hit / len(liked)
        precisions.append(p)
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    if not precisions:
        return UserOrientedScores(None, None, None, 0)
    return UserOrientedScores(
        float(np.mean(precisions)), float(np.mean(recalls)),
        float(np.mean(f1s)), len(precisions))


def _rerank_contains(model, matrices, user, item, k, y_matrix) -> bool:
    ranked = recommend_top_k(model, matrices, user, k, item_matrix=y_matrix)
    return item in ranked


def pn_score(explanations, model, matrices: AspectMatrices, k: int):
    """Probability of necessity: zero the explanation's aspect columns for
    every item, re-rank, and count the explained items that drop out.

    Returns (mean, per-pair flags); mean is None when no explanation has a
    nonempty aspect set.
    """
    flags = {}
    for e in explanations:
        if not e.valid or not e.aspects:
            continue
        y_star = matrices.Y.copy()
        y_star[:, list(e.aspects)] = 0.0
        stays = _rerank_contains(model, matrices, e.user, e.item, k, y_star)
        flags[(e.user, e.item)] = not stays
    if not flags:
        return None, {}
    return float(np.mean([v for v in flags.values()])), flags


def ps_score(explanations, model, matrices: AspectMatrices, k: int):
    """Probability of sufficiency: keep only the explanation's aspect
    columns (zero all others), re-rank, and count the items that remain."""
    flags = {}
    for e in explanations:
        if not e.valid or not e.aspects:
            continue
        y_prime = np.zeros_like(matrices.Y)
        cols = list(e.aspects)
        y_prime[:, cols] = matrices.Y[:, cols]
        flags[(e.user, e.item)] = _rerank_contains(
            model, matrices, e.user, e.item, k, y_prime)
    if not flags:
        return None, {}
    return float(np.mean([v for v in flags.values()])), flags


def f_ns(pn: float, ps: float) -> float:
    """Harmonic mean of necessity and sufficiency; zero when both vanish."""
    if not 0.0 <= pn <= 1.0 or not 0.0 <= ps <= 1.0:
        raise ValueError("pn and ps must lie in [0, 1]")
    if pn + ps == 0.0:
        return 0.0
    return 2.0 * pn * ps / (pn + ps)


def random_explanations(ranked_lists, sizes: dict, n_aspects: int,
                        seed: int):
    """Size-matched uniform aspect picks, evaluated like any explanation.

    ``sizes`` maps (user, item) to the number of aspects to sample; pairs
    are visited in ranked-list order so a fixed seed reproduces the batch.
    """
    rng = np.random.default_rng(seed)
    out = []
    for ranked in ranked_lists:
        for rank, item in enumerate(ranked.items, start=1):
            key = (ranked.user, int(item))
            if key not in sizes:
                continue
            size = sizes[key]
            if size > n_aspects:
                raise ValueError(
                    f"cannot sample {size} distinct aspects out of {n_aspects}")
            chosen = np.sort(rng.choice(n_aspects, size=size, replace=False))
            values = np.zeros(n_aspects)
            values[chosen] = -1.0
            out.append(Explanation(
                user=ranked.user, item=int(item), variant=RANDOM_VARIANT,
                delta=ChangeVector(values, tau=0.0),
                aspects=tuple(int(a) for a in chosen),
                complexity=complexity(values, gamma=1.0),
                strength=0.0,
                epsilon=float(ranked.scores[rank - 1] - ranked.boundary_score),
                valid=True, rank=rank))
    return out


@dataclass
class PositionStats:
    mean_complexity: float
    mean_strength: float
    mean_aspects: float
    count: int


def position_profile(explanations) -> dict[int, PositionStats]:
    """Mean complexity / strength / aspect count of valid explanations,
    grouped by the explained item's rank position."""
    buckets: dict[int, list[Explanation]] = {}
    for e in explanations:
        if e.valid:
            buckets.setdefault(e.rank, []).append(e)
    return {
        rank: PositionStats(
            mean_complexity=float(np.mean([e.complexity for e in group])),
            mean_strength=float(np.mean([e.strength for e in group])),
            mean_aspects=float(np.mean([len(e.aspects) for e in group])),
            count=len(group))
        for rank, group in sorted(buckets.items())
    }


@dataclass
class VariantReport:
    variant: str
    n_attempted: int
    n_valid: int
    fidelity: float
    user: UserOrientedScores
    pn: float | None
    ps: float | None
    f_ns: float | None
    n_model_pairs: int
    profile: dict[int, PositionStats]


@dataclass
class EvalReport:
    variants: dict[str, VariantReport]
    k: int
    config_hash: str | None = None

    @property
    def applicable(self) -> bool:
        return bool(self.variants)


def build_report(explanations, truth: dict, model: RecommenderModel,
                 matrices: AspectMatrices, k: int,
                 config_hash: str | None = None) -> EvalReport:
    """Assemble the full evaluation for a batch of explanations, grouped by
    variant tag."""
    by_variant: dict[str, list[Explanation]] = {}
    for e in explanations:
        by_variant.setdefault(e.variant, []).append(e)

    variants = {}
    for variant, batch in sorted(by_variant.items()):
        pn, pn_flags = pn_score(batch, model, matrices, k)
        ps, ps_flags = ps_score(batch, model, matrices, k)
        fns = f_ns(pn, ps) if pn is not None and ps is not None else None
        variants[variant] = VariantReport(
            variant=variant,
            n_attempted=len(batch),
            n_valid=sum(e.valid for e in batch),
            fidelity=fidelity(batch),
            user=user_oriented(batch, truth),
            pn=pn, ps=ps, f_ns=fns,
            n_model_pairs=len(pn_flags),
            profile=position_profile(batch))
    return EvalReport(variants=variants, k=k, config_hash=config_hash)


# -- report files --------------------------------------------------------------

def report_to_dict(report: EvalReport) -> dict:
    payload = {
        "meta": "aspectcf-report",
        "config_hash": report.config_hash,
        "k": report.k,
        "applicable": report.applicable,
        "variants": {},
    }
    for name, vr in report.variants.items():
        payload["variants"][name] = {
            "n_attempted": vr.n_attempted,
            "n_valid": vr.n_valid,
            "fidelity": vr.fidelity,
            "user_oriented": {
                "precision": vr.user.precision,
                "recall": vr.user.recall,
                "f1": vr.user.f1,
                "n_pairs": vr.user.n_pairs,
            },
            "model_oriented": {
                "pn": vr.pn,
                "ps": vr.ps,
                "f_ns": vr.f_ns,
                "n_pairs": vr.n_model_pairs,
            },
            "position_profile": {
                str(rank): {
                    "mean_complexity": st.mean_complexity,
                    "mean_strength": st.mean_strength,
                    "mean_aspects": st.mean_aspects,
                    "count": st.count,
                } for rank, st in vr.profile.items()
            },
        }
    return payload


def write_report(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pair_csv(explanations, truth: dict, corpus: Corpus,
                   path: str | os.PathLike,
                   pn_flags: dict | None = None,
                   ps_flags: dict | None = None) -> None:
    """Flat per-pair rows for downstream analysis."""
    pn_flags = pn_flags or {}
    ps_flags = ps_flags or {}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id", "variant", "rank", "valid",
                         "complexity", "strength", "epsilon", "n_aspects",
                         "in_test", "pn", "ps"])
        for e in explanations:
            key = (e.user, e.item)
            writer.writerow([
                corpus.user_ids[e.user], corpus.item_ids[e.item], e.variant,
                e.rank, int(e.valid), repr(e.complexity), repr(e.strength),
                repr(e.epsilon), len(e.aspects), int(key in truth),
                "" if key not in pn_flags else int(pn_flags[key]),
                "" if key not in ps_flags else int(ps_flags[key])])


def write_profile_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "rank", "mean_complexity",
                         "mean_strength", "mean_aspects", "count"])
        for name, vr in report.variants.items():
            for rank, st in vr.profile.items():
                writer.writerow([name, rank, repr(st.mean_complexity),
                                 repr(st.mean_strength),
                                 repr(st.mean_aspects), st.count])
