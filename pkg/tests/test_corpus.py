import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aspectcf import corpus as cp


# Independent scalar evaluation of the squashing formulas, kept separate
# from the vectorized implementation on purpose.
def oracle_user_entry(t, scale):
    return 1.0 + (scale - 1.0) * (2.0 / (1.0 + math.exp(-t)) - 1.0)


def oracle_item_entry(t, s, scale):
    return 1.0 + (scale - 1.0) / (1.0 + math.exp(-t * s))


def make_corpus(lines, **kwargs):
    import io, tempfile, os
    fd, path = tempfile.mkstemp(suffix=".tsv")
    with os.fdopen(fd, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    try:
        return cp.ingest(path, **kwargs)
    finally:
        os.unlink(path)


class TestIngest:
    def test_empty_file(self):
        corpus = make_corpus([])
        assert corpus.m == 0 and corpus.n == 0 and corpus.records == []

    def test_single_record(self):
        corpus = make_corpus(["u1\ti1\t5\t100\tbattery:1.0"])
        assert corpus.m == 1 and corpus.n == 1
        assert len(corpus.records) == 1
        rec = corpus.records[0]
        assert rec.rating == 5 and rec.timestamp == 100
        assert rec.mentions == [(0, 1.0)]
        assert corpus.catalog.names == ("battery",)

    def test_duplicate_pair_merged(self):
        corpus = make_corpus([
            "u1\ti1\t5\t100\tbattery:1.0",
            "u1\ti1\t3\t200\tscreen:-0.5",
        ])
        assert len(corpus.records) == 1
        rec = corpus.records[0]
        # mentions concatenate, chronologically latest rating/timestamp win
        assert rec.mentions == [(0, 1.0), (1, -0.5)]
        assert rec.rating == 3 and rec.timestamp == 200

    def test_malformed_line_reports_number(self):
        with pytest.raises(cp.CorpusFormatError, match="line 2"):
            make_corpus(["u1\ti1\t5\t100\tbattery:1.0", "not a record"])

    def test_sentiment_out_of_range(self):
        with pytest.raises(cp.CorpusFormatError, match=r"\[-1, 1\]"):
            make_corpus(["u1\ti1\t5\t100\tbattery:1.5"])

    def test_unknown_aspect_with_fixed_catalog(self):
        catalog = cp.AspectCatalog(("battery",))
        with pytest.raises(cp.CorpusFormatError, match="unknown aspect"):
            make_corpus(["u1\ti1\t5\t100\tprice:0.5"], catalog=catalog)

    def test_scale_header(self):
        corpus = make_corpus(["#scale=3", "u1\ti1\t3\t100\tbattery:1.0"])
        assert corpus.rating_scale == 3

    def test_rating_outside_scale(self):
        with pytest.raises(cp.CorpusFormatError, match="rating"):
            make_corpus(["#scale=3", "u1\ti1\t5\t100\tbattery:1.0"])

    def test_empty_mentions_field(self):
        corpus = make_corpus(["u1\ti1\t4\t100\t"])
        assert corpus.records[0].mentions == []

    def test_roundtrip_through_writer(self, tmp_path):
        corpus = make_corpus([
            "u1\ti1\t5\t100\tbattery:1.0,screen:-0.25",
            "u2\ti1\t2\t50\tprice:0.125",
        ])
        out = tmp_path / "copy.tsv"
        cp.write_interactions(corpus, out)
        again = cp.ingest(out)
        assert again.user_ids == corpus.user_ids
        assert again.item_ids == corpus.item_ids
        assert again.catalog.names == corpus.catalog.names
        assert [(r.user, r.item, r.rating, r.timestamp, r.mentions)
                for r in again.records] == \
               [(r.user, r.item, r.rating, r.timestamp, r.mentions)
                for r in corpus.records]

    def test_index_maps_written(self, tmp_path):
        corpus = make_corpus(["u1\ti1\t5\t100\tbattery:1.0"])
        cp.write_index_maps(corpus, tmp_path)
        assert (tmp_path / "users.tsv").read_text() == "u1\t0\n"
        assert (tmp_path / "aspects.tsv").read_text() == "battery\t0\n"


class TestHoldoutSplit:
    def lines_for(self, user, n, t0=1):
        return [f"{user}\titem{k}\t5\t{t0 + k}\tbattery:1.0" for k in range(n)]

    def test_seven_interactions(self):
        corpus = make_corpus(self.lines_for("u1", 7))
        split = cp.holdout_split(corpus)
        assert split.train_items[0] == [0, 1]
        assert split.test_items[0] == [2, 3, 4, 5, 6]
        assert split.evaluable[0]

    def test_five_interactions_all_train(self):
        corpus = make_corpus(self.lines_for("u1", 5))
        split = cp.holdout_split(corpus)
        assert split.train_items[0] == [0, 1, 2, 3, 4]
        assert split.test_items[0] == []
        assert not split.evaluable[0]

    def test_timestamp_tie_broken_by_item_index(self):
        # items 1 and 0 share timestamp 10; item 0 must be ordered first
        corpus = make_corpus([
            "u1\tb\t5\t10\tbattery:1.0",   # item 0
            "u1\ta\t5\t10\tbattery:1.0",   # item 1
            "u1\tc\t5\t5\tbattery:1.0",    # item 2, earliest
        ] + [f"u1\td{k}\t5\t{20 + k}\tbattery:1.0" for k in range(5)])
        split = cp.holdout_split(corpus)
        # order: item2(t5), item0(t10), item1(t10), then the five later ones
        assert split.train_items[0] == [2, 0, 1]


class TestMatrices:
    def build(self, lines, **kwargs):
        corpus = make_corpus(lines, **kwargs)
        split = cp.holdout_split(corpus)
        return corpus, split, cp.build_matrices(corpus, split)

    def test_unmentioned_aspect_is_zero(self):
        _, _, mats = self.build([
            "u1\ti1\t5\t1\tbattery:1.0",
            "u1\ti2\t5\t2\tscreen:1.0",
        ])
        assert mats.X[0, 1] != 0  # screen mentioned
        assert mats.X.shape == (1, 2)

    def test_user_entry_t1(self):
        _, _, mats = self.build(["u1\ti1\t5\t1\tbattery:1.0"])
        assert mats.X[0, 0] == pytest.approx(2.848469, abs=1e-5)
        assert mats.X[0, 0] == pytest.approx(oracle_user_entry(1, 5), abs=1e-12)

    def test_user_entry_saturates_below_scale(self):
        lines = ["u1\ti1\t5\t1\t" + ",".join(["battery:1.0"] * 1000)]
        corpus = make_corpus(lines)
        # inflate the count far beyond what a file would carry
        corpus.records[0].mentions = [(0, 1.0)] * 10**6
        split = cp.holdout_split(corpus)
        x = cp.user_aspect_matrix(corpus, split)
        assert x[0, 0] < 5.0

    def test_item_entry_zero_sentiment(self):
        _, _, mats = self.build(["u1\ti1\t5\t1\tbattery:1.0,battery:-1.0"])
        # two mentions, mean sentiment zero -> t*s = 0 -> exactly 3.0
        assert mats.Y[0, 0] == 3.0

    def test_item_entry_t2_s1(self):
        _, _, mats = self.build(["u1\ti1\t5\t1\tbattery:1.0,battery:1.0"])
        assert mats.Y[0, 0] == pytest.approx(4.523188, abs=1e-5)
        assert mats.Y[0, 0] == pytest.approx(oracle_item_entry(2, 1.0, 5), abs=1e-12)

    def test_unreviewed_item_aspect_zero(self):
        _, _, mats = self.build(["u1\ti1\t5\t1\tbattery:1.0"])
        corpus = make_corpus(["u1\ti1\t5\t1\tbattery:1.0", "u1\ti2\t5\t2\t"])
        split = cp.holdout_split(corpus)
        y = cp.item_aspect_matrix(corpus, split)
        assert y[1, 0] == 0.0

    def test_interaction_matrix_cases(self):
        corpus = make_corpus([])
        split = cp.holdout_split(corpus)
        assert cp.interaction_matrix(corpus, split).nnz == 0

        corpus, split, mats = self.build(["u1\ti1\t5\t1\tbattery:1.0"])
        assert mats.B[0, 0] == 1 and mats.B.nnz == 1

    def test_test_only_pair_not_in_b(self):
        lines = [f"u1\titem{k}\t5\t{k}\tbattery:1.0" for k in range(7)]
        corpus, split, mats = self.build(lines)
        assert split.test_items[0] == [2, 3, 4, 5, 6]
        for item in split.test_items[0]:
            assert mats.B[0, item] == 0
        for item in split.train_items[0]:
            assert mats.B[0, item] == 1

    def test_matrices_match_scalar_oracle(self):
        # users with increasing mention counts, items with varied sentiment
        rng = np.random.default_rng(7)
        lines = []
        counts = {}
        sents = {}
        for u in range(8):
            t = int(rng.integers(1, 12))
            s = round(float(rng.uniform(-1, 1)), 3)
            counts[u] = t
            sents[u] = s
            mention = ",".join([f"a:{s}"] * t)
            lines.append(f"user{u}\titem{u}\t5\t{u}\t{mention}")
        corpus, split, mats = self.build(lines)
        for u in range(8):
            assert mats.X[u, 0] == pytest.approx(
                oracle_user_entry(counts[u], 5), abs=1e-12)
            assert mats.Y[u, 0] == pytest.approx(
                oracle_item_entry(counts[u], sents[u], 5), abs=1e-12)

    def test_monotone_in_mention_count(self):
        xs = []
        for t in range(1, 10):
            mention = ",".join(["a:1.0"] * t)
            _, _, mats = self.build([f"u1\ti1\t5\t1\t{mention}"])
            xs.append(mats.X[0, 0])
        assert all(b > a for a, b in zip(xs, xs[1:]))

    def test_determinism(self, tmp_path):
        lines = ["u1\ti1\t5\t100\tbattery:1.0,screen:-0.25",
                 "u2\ti2\t2\t50\tprice:0.125"]
        path = tmp_path / "data.tsv"
        path.write_text("\n".join(lines) + "\n")
        c1, c2 = cp.ingest(path), cp.ingest(path)
        s1, s2 = cp.holdout_split(c1), cp.holdout_split(c2)
        m1, m2 = cp.build_matrices(c1, s1), cp.build_matrices(c2, s2)
        assert np.array_equal(m1.X, m2.X) and np.array_equal(m1.Y, m2.Y)
        assert (m1.B != m2.B).nnz == 0

    def test_no_leakage_from_test_reviews(self):
        lines = []
        rng = np.random.default_rng(3)
        for u in range(4):
            for k in range(8):
                asp = f"a{rng.integers(0, 3)}"
                s = round(float(rng.uniform(-1, 1)), 2)
                lines.append(f"user{u}\titem{k}\t5\t{k}\t{asp}:{s}")
        corpus = make_corpus(lines)
        split = cp.holdout_split(corpus)
        mats = cp.build_matrices(corpus, split)
        stripped = cp.strip_test_mentions(corpus, split)
        mats2 = cp.build_matrices(stripped, split)
        assert np.array_equal(mats.X, mats2.X)
        assert np.array_equal(mats.Y, mats2.Y)
        assert (mats.B != mats2.B).nnz == 0


class TestRangeLaws:
    @given(t=st.integers(min_value=1, max_value=10**6),
           scale=st.integers(min_value=2, max_value=10))
    @settings(max_examples=60, deadline=None)
    def test_user_entry_in_open_interval(self, t, scale):
        corpus = cp.Corpus(
            m=1, n=1, catalog=cp.AspectCatalog(("a",)),
            records=[cp.InteractionRecord(0, 0, 1, 0, [(0, 1.0)] * t)],
            rating_scale=scale)
        split = cp.holdout_split(corpus)
        x = cp.user_aspect_matrix(corpus, split)[0, 0]
        assert 1.0 < x < scale

    @given(t=st.integers(min_value=1, max_value=2000),
           s=st.floats(min_value=-1.0, max_value=1.0),
           scale=st.integers(min_value=2, max_value=10))
    @settings(max_examples=60, deadline=None)
    def test_item_entry_in_open_interval(self, t, s, scale):
        corpus = cp.Corpus(
            m=1, n=1, catalog=cp.AspectCatalog(("a",)),
            records=[cp.InteractionRecord(0, 0, 1, 0, [(0, s)] * t)],
            rating_scale=scale)
        split = cp.holdout_split(corpus)
        y = cp.item_aspect_matrix(corpus, split)[0, 0]
        assert 1.0 < y < scale

    def test_random_corpus_range_law(self):
        rng = np.random.default_rng(11)
        lines = []
        for u in range(10):
            for k in range(6):
                t = int(rng.integers(1, 6))
                asp = f"a{rng.integers(0, 4)}"
                s = round(float(rng.uniform(-1, 1)), 3)
                mention = ",".join([f"{asp}:{s}"] * t)
                lines.append(f"user{u}\titem{rng.integers(0, 12)}\t"
                             f"{rng.integers(1, 6)}\t{u * 10 + k}\t{mention}")
        text = []
        seen = set()
        for line in lines:  # keep one line per pair to avoid merge noise
            key = tuple(line.split("\t")[:2])
            if key not in seen:
                seen.add(key)
                text.append(line)
        corpus = make_corpus(text)
        split = cp.holdout_split(corpus)
        mats = cp.build_matrices(corpus, split)
        for mat, scale in ((mats.X, corpus.rating_scale), (mats.Y, corpus.rating_scale)):
            nz = mat[mat != 0]
            assert np.all((nz > 1.0) & (nz < scale))
