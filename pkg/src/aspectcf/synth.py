"""Synthetic corpora with planted aspect preferences and known driver truth.

Each user gets a preferred aspect set, each item a quality aspect set, and
interactions only happen where the two overlap. The overlap (the "driver"
aspects) is what the review praises, so the generator doubles as a gold
standard for explanation recovery at desk scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import AspectCatalog, Corpus, InteractionRecord

_TIMESTAMP_SPACE = 10 ** 6


@dataclass
class SynthSpec:
    """Generator parameters; the seed is mandatory."""

    seed: int
    n_users: int = 100
    n_items: int = 500
    n_aspects: int = 20
    aspects_per_user: int = 4
    aspects_per_item: int = 3
    density: float = 0.02          # target interactions / (users * items)
    mention_geom_p: float = 0.5    # geometric mention-count parameter
    mention_cap: int = 10
    noise: float = 0.0             # per-aspect chance of an off-driver mention
    rating_scale: int = 5

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_aspects,
               self.aspects_per_user, self.aspects_per_item) < 1:
            raise ValueError("all counts must be at least 1")
        if self.aspects_per_user > self.n_aspects or \
                self.aspects_per_item > self.n_aspects:
            raise ValueError("per-entity aspect sets cannot exceed the catalog")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must be in (0, 1]")
        if not 0.0 < self.mention_geom_p <= 1.0:
            raise ValueError("mention_geom_p must be in (0, 1]")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must be in [0, 1]")
        if self.rating_scale < 2:
            raise ValueError("rating scale must be at least 2")

    @property
    def interactions_per_user(self) -> int:
        return int(round(self.density * self.n_items))


@dataclass
class PlantedTruth:
    """What the generator planted: per-user preferences, per-item qualities,
    and the driver set behind every interaction."""

    preferred: list[tuple[int, ...]]
    quality: list[tuple[int, ...]]
    drivers: dict[tuple[int, int], tuple[int, ...]]


class InfeasibleSpecError(ValueError):
    """The requested density cannot be met with overlapping pairs."""


def generate(spec: SynthSpec) -> tuple[Corpus, PlantedTruth]:
    """Build a corpus where every interaction is driven by shared aspects.

    Reviews mention each driver aspect one or more times with positive
    sentiment; with nonzero noise, non-driver aspects occasionally slip in
    with arbitrary sentiment. Fully deterministic for a fixed seed.
    """
    rng = np.random.default_rng(spec.seed)
    m, n, r = spec.n_users, spec.n_items, spec.n_aspects

    preferred = [tuple(sorted(rng.choice(r, spec.aspects_per_user,
                                         replace=False))) for _ in range(m)]
    quality = [tuple(sorted(rng.choice(r, spec.aspects_per_item,
                                       replace=False))) for _ in range(n)]
    quality_sets = [set(q) for q in quality]

    per_user = spec.interactions_per_user
    if per_user < 1:
        raise InfeasibleSpecError(
            f"density {spec.density} yields no interactions per user")

    records = []
    drivers: dict[tuple[int, int], tuple[int, ...]] = {}
    for user in range(m):
        pref = set(preferred[user])
        eligible = np.array([j for j in range(n) if pref & quality_sets[j]])
        if len(eligible) < per_user:
            raise InfeasibleSpecError(
                f"user {user}: only {len(eligible)} items share aspects but "
                f"{per_user} interactions are required")
        items = rng.choice(eligible, size=per_user, replace=False)
        timestamps = rng.choice(_TIMESTAMP_SPACE, size=per_user, replace=False)
        for item, ts in zip(items, timestamps):
            item = int(item)
            driver = tuple(sorted(pref & quality_sets[item]))
            drivers[(user, item)] = driver
            mentions = []
            for aspect in driver:
                count = min(int(rng.geometric(spec.mention_geom_p)),
                            spec.mention_cap)
                for _ in range(count):
                    mentions.append((aspect, float(rng.uniform(0.5, 1.0))))
            if spec.noise > 0.0:
                for aspect in range(r):
                    if aspect in driver:
                        continue
                    if rng.random() < spec.noise:
                        mentions.append((aspect, float(rng.uniform(-1.0, 1.0))))
            rating = int(rng.integers(spec.rating_scale - 1,
                                      spec.rating_scale + 1))
            records.append(InteractionRecord(user, item, rating, int(ts),
                                             mentions))

    catalog = AspectCatalog(tuple(f"a{k}" for k in range(r)))
    corpus = Corpus(m=m, n=n, catalog=catalog, records=records,
                    rating_scale=spec.rating_scale)
    return corpus, PlantedTruth(preferred, quality, drivers)


def oracle_explanations(truth: PlantedTruth) -> dict[tuple[int, int], frozenset]:
    """Gold aspect sets: the planted driver aspects of each interaction."""
    return {pair: frozenset(aspects) for pair, aspects in truth.drivers.items()}


def write_truth(corpus: Corpus, truth: PlantedTruth,
                path: str | os.PathLike) -> None:
    """Persist driver sets as TSV: user_id, item_id, comma-joined aspects."""
    with open(path, "w", encoding="utf-8") as fh:
        for (user, item), aspects in truth.drivers.items():
            names = ",".join(corpus.catalog.names[a] for a in aspects)
            fh.write(f"{corpus.user_ids[user]}\t{corpus.item_ids[item]}\t{names}\n")
