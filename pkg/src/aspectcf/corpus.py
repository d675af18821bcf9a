"""Review corpus ingestion, chronological holdout, and aspect matrix construction.

The corpus is a set of (user, item) interactions, each carrying the aspect
mentions extracted upstream from the review text as (aspect, sentiment)
pairs. From the training part of the corpus we build:

* ``X`` (m x r): how much each user cares about each aspect,
* ``Y`` (n x r): how well each item performs on each aspect,
* ``B`` (m x n, sparse binary): which training interactions exist.

Nonzero entries of X and Y are squashed into the open interval (1, N),
where N is the rating scale.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

HOLDOUT_TEST_SIZE = 5
DEFAULT_RATING_SCALE = 5

_RESERVED_NAME_CHARS = ("\t", "\n", ",", ":")


class CorpusFormatError(ValueError):
    """An interaction file violates the expected grammar."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


@dataclass(frozen=True)
class AspectCatalog:
    """Ordered aspect identifiers; indices are dense in [0, r)."""

    names: tuple[str, ...]
    display_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.display_names:
            object.__setattr__(self, "display_names", self.names)
        if len(self.display_names) != len(self.names):
            raise ValueError("display_names must match names in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("aspect identifiers must be unique")
        for name in self.names:
            if not name or any(c in name for c in _RESERVED_NAME_CHARS):
                raise ValueError(f"invalid aspect identifier: {name!r}")
        object.__setattr__(self, "_index", {a: i for i, a in enumerate(self.names)})

    @property
    def r(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown aspect: {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class InteractionRecord:
    """One (user, item) interaction with its review-derived aspect mentions.

    ``mentions`` is a list of (aspect index, sentiment) pairs, one entry per
    mention; repeated aspects are repeated entries. Sentiment lies in [-1, 1].
    """

    user: int
    item: int
    rating: int
    timestamp: int
    mentions: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class Corpus:
    """Deduplicated interactions plus the dense id/index maps."""

    m: int
    n: int
    catalog: AspectCatalog
    records: list[InteractionRecord]
    rating_scale: int = DEFAULT_RATING_SCALE
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.user_ids:
            self.user_ids = tuple(f"u{i}" for i in range(self.m))
        if not self.item_ids:
            self.item_ids = tuple(f"i{j}" for j in range(self.n))
        if len(self.user_ids) != self.m or len(self.item_ids) != self.n:
            raise ValueError("id maps inconsistent with m / n")
        if self.rating_scale < 2:
            raise ValueError("rating scale must be at least 2")
        seen = set()
        for rec in self.records:
            if not (0 <= rec.user < self.m and 0 <= rec.item < self.n):
                raise ValueError(f"record ({rec.user},{rec.item}) out of range")
            if (rec.user, rec.item) in seen:
                raise ValueError(f"duplicate record for pair ({rec.user},{rec.item})")
            seen.add((rec.user, rec.item))
            for aspect, sentiment in rec.mentions:
                if not 0 <= aspect < self.catalog.r:
                    raise ValueError(f"aspect index {aspect} out of range")
                if not -1.0 <= sentiment <= 1.0:
                    raise ValueError(f"sentiment {sentiment} outside [-1, 1]")

    @property
    def r(self) -> int:
        return self.catalog.r


@dataclass
class HoldoutSplit:
    """Per-user chronological split; the last interactions are held out.

    Users with fewer than HOLDOUT_TEST_SIZE + 1 interactions keep everything
    in train and are flagged non-evaluable.
    """

    train_items: list[list[int]]
    test_items: list[list[int]]
    evaluable: list[bool]

    def test_pairs(self):
        for user, items in enumerate(self.test_items):
            for item in items:
                yield user, item


@dataclass
class AspectMatrices:
    """X, Y per the squashed mention statistics; B the binary train matrix."""

    X: np.ndarray
    Y: np.ndarray
    B: sp.csr_matrix

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def r(self) -> int:
        return self.X.shape[1]

    def train_items(self, user: int) -> np.ndarray:
        """Item indices the user interacted with in the training split."""
        return self.B.indices[self.B.indptr[user]:self.B.indptr[user + 1]]


def _parse_mentions(text: str, line_no: int) -> list[tuple[str, float]]:
    if not text:
        return []
    out = []
    for chunk in text.split(","):
        name, sep, raw = chunk.rpartition(":")
        if not sep or not name:
            raise CorpusFormatError(f"malformed mention {chunk!r}", line_no)
        try:
            sentiment = float(raw)
        except ValueError:
            raise CorpusFormatError(f"bad sentiment {raw!r}", line_no) from None
        if not -1.0 <= sentiment <= 1.0:
            raise CorpusFormatError(
                f"sentiment {sentiment} outside [-1, 1]", line_no)
        out.append((name, sentiment))
    return out


def ingest(path: str | os.PathLike, catalog: AspectCatalog | None = None,
           rating_scale: int | None = None) -> Corpus:
    """Parse an interaction file into a deduplicated Corpus.

    File grammar: one record per line with tab-separated fields
    ``user_id  item_id  rating  timestamp  mentions`` where mentions is a
    comma-separated list of ``aspect_name:sentiment``. An optional header
    line ``#scale=N`` declares the rating scale (default 5); an explicit
    ``rating_scale`` argument wins over the header. Other ``#`` lines are
    comments.

    When ``catalog`` is given it is fixed: unknown aspect names are an
    error. Otherwise aspects are discovered in first-appearance order.

    Duplicate (user, item) lines are merged: mention lists concatenate and
    the chronologically latest rating/timestamp is kept.
    """
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    aspects: dict[str, int] = {} if catalog is None else None
    scale = None
    # keyed by (user_id, item_id); values [user, item, rating, ts, mentions]
    merged: dict[tuple[str, str], list] = {}

    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith("#scale="):
                    try:
                        scale = int(line[len("#scale="):])
                    except ValueError:
                        raise CorpusFormatError(
                            f"bad scale header {line!r}", line_no) from None
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise CorpusFormatError(
                    f"expected 5 tab-separated fields, got {len(fields)}", line_no)
            user_id, item_id, rating_raw, ts_raw, mention_raw = fields
            if not user_id or not item_id:
                raise CorpusFormatError("empty user or item id", line_no)
            try:
                rating = int(rating_raw)
                timestamp = int(ts_raw)
            except ValueError:
                raise CorpusFormatError(
                    f"bad rating/timestamp {rating_raw!r} {ts_raw!r}", line_no) from None
            named = _parse_mentions(mention_raw, line_no)

            mentions = []
            for name, sentiment in named:
                if catalog is not None:
                    if name not in catalog:
                        raise CorpusFormatError(
                            f"unknown aspect {name!r} (catalog is fixed)", line_no)
                    idx = catalog.index(name)
                else:
                    idx = aspects.setdefault(name, len(aspects))
                mentions.append((idx, sentiment))

            user = users.setdefault(user_id, len(users))
            item = items.setdefault(item_id, len(items))
            key = (user_id, item_id)
            if key in merged:
                prev = merged[key]
                prev[4].extend(mentions)
                if timestamp >= prev[3]:
                    prev[2], prev[3] = rating, timestamp
            else:
                merged[key] = [user, item, rating, timestamp, mentions]

    if rating_scale is not None:
        scale = rating_scale
    elif scale is None:
        scale = DEFAULT_RATING_SCALE

    for key, (user, item, rating, timestamp, _) in merged.items():
        if not 1 <= rating <= scale:
            raise CorpusFormatError(
                f"rating {rating} outside [1, {scale}] for pair {key}")

    if catalog is None:
        catalog = AspectCatalog(tuple(aspects))
    records = [InteractionRecord(u, i, rt, ts, ms)
               for (u, i, rt, ts, ms) in merged.values()]
    return Corpus(
        m=len(users), n=len(items), catalog=catalog, records=records,
        rating_scale=scale,
        user_ids=tuple(users), item_ids=tuple(items))


def write_interactions(corpus: Corpus, path: str | os.PathLike) -> None:
    """Write a corpus back out in the interaction-file grammar."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#scale={corpus.rating_scale}\n")
        for rec in corpus.records:
            mentions = ",".join(
                f"{corpus.catalog.names[a]}:{s!r}" for a, s in rec.mentions)
            fh.write(f"{corpus.user_ids[rec.user]}\t{corpus.item_ids[rec.item]}\t"
                     f"{rec.rating}\t{rec.timestamp}\t{mentions}\n")


def write_index_maps(corpus: Corpus, directory: str | os.PathLike) -> None:
    """Persist the dense user/item/aspect index maps as two-column TSVs."""
    os.makedirs(directory, exist_ok=True)
    for fname, ids in (("users.tsv", corpus.user_ids),
                       ("items.tsv", corpus.item_ids),
                       ("aspects.tsv", corpus.catalog.names)):
        with open(os.path.join(directory, fname), "w", encoding="utf-8") as fh:
            for idx, ident in enumerate(ids):
                fh.write(f"{ident}\t{idx}\n")


def holdout_split(corpus: Corpus) -> HoldoutSplit:
    """Hold out each user's chronologically last interactions for testing.

    Ordering is by (timestamp, item index); the last HOLDOUT_TEST_SIZE go to
    test. Users with too few interactions put everything in train and are
    marked non-evaluable.
    """
    per_user: list[list[InteractionRecord]] = [[] for _ in range(corpus.m)]
    for rec in corpus.records:
        per_user[rec.user].append(rec)

    train_items, test_items, evaluable = [], [], []
    for recs in per_user:
        recs.sort(key=lambda rec: (rec.timestamp, rec.item))
        if len(recs) >= HOLDOUT_TEST_SIZE + 1:
            cut = len(recs) - HOLDOUT_TEST_SIZE
            train_items.append([rec.item for rec in recs[:cut]])
            test_items.append([rec.item for rec in recs[cut:]])
            evaluable.append(True)
        else:
            train_items.append([rec.item for rec in recs])
            test_items.append([])
            evaluable.append(False)
    return HoldoutSplit(train_items, test_items, evaluable)


def _training_records(corpus: Corpus, split: HoldoutSplit):
    train_sets = [set(items) for items in split.train_items]
    for rec in corpus.records:
        if rec.item in train_sets[rec.user]:
            yield rec


def _squash_open_interval(values: np.ndarray, scale: int) -> np.ndarray:
    # Entries must stay strictly inside (1, N); the sigmoid saturates to the
    # closed endpoints in float arithmetic for extreme inputs.
    lo = np.nextafter(1.0, 2.0)
    hi = np.nextafter(float(scale), 1.0)
    return np.clip(values, lo, hi)


def user_aspect_matrix(corpus: Corpus, split: HoldoutSplit) -> np.ndarray:
    """X: 0 where the user never mentions the aspect in training reviews,
    else 1 + (N-1)*(2*sigmoid(t) - 1) with t the training mention count."""
    counts = np.zeros((corpus.m, corpus.r))
    for rec in _training_records(corpus, split):
        for aspect, _ in rec.mentions:
            counts[rec.user, aspect] += 1.0
    scale = corpus.rating_scale
    values = 1.0 + (scale - 1.0) * (2.0 * expit(counts) - 1.0)
    return np.where(counts > 0, _squash_open_interval(values, scale), 0.0)


def item_aspect_matrix(corpus: Corpus, split: HoldoutSplit) -> np.ndarray:
    """Y: 0 where the item is never reviewed on the aspect in training,
    else 1 + (N-1)*sigmoid(t*s) with t the mention count, s the mean
    sentiment of those mentions."""
    counts = np.zeros((corpus.n, corpus.r))
    sent_sum = np.zeros((corpus.n, corpus.r))
    for rec in _training_records(corpus, split):
        for aspect, sentiment in rec.mentions:
            counts[rec.item, aspect] += 1.0
            sent_sum[rec.item, aspect] += sentiment
    scale = corpus.rating_scale
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_sent = np.where(counts > 0, sent_sum / counts, 0.0)
    values = 1.0 + (scale - 1.0) * expit(counts * mean_sent)
    return np.where(counts > 0, _squash_open_interval(values, scale), 0.0)


def interaction_matrix(corpus: Corpus, split: HoldoutSplit) -> sp.csr_matrix:
    """B: binary m x n matrix with a 1 for every training-split pair."""
    rows, cols = [], []
    for rec in _training_records(corpus, split):
        rows.append(rec.user)
        cols.append(rec.item)
    data = np.ones(len(rows), dtype=np.int8)
    return sp.csr_matrix((data, (rows, cols)), shape=(corpus.m, corpus.n))


def build_matrices(corpus: Corpus, split: HoldoutSplit) -> AspectMatrices:
    return AspectMatrices(
        X=user_aspect_matrix(corpus, split),
        Y=item_aspect_matrix(corpus, split),
        B=interaction_matrix(corpus, split))


def strip_test_mentions(corpus: Corpus, split: HoldoutSplit) -> Corpus:
    """Copy of the corpus with all test-split review content blanked.

    Used to verify that matrix construction never reads held-out reviews.
    """
    test_sets = [set(items) for items in split.test_items]
    stripped = copy.deepcopy(corpus)
    for rec in stripped.records:
        if rec.item in test_sets[rec.user]:
            rec.mentions = []
    return stripped
