import numpy as np
import pytest

from aspectcf import corpus as cp
from aspectcf import metrics as mx
from aspectcf.synth import (InfeasibleSpecError, PlantedTruth, SynthSpec,
                            generate, oracle_explanations, write_truth)


SMALL = dict(n_users=20, n_items=50, n_aspects=8, aspects_per_user=3,
             aspects_per_item=3, density=0.1)


class TestSpec:
    def test_counts_validated(self):
        with pytest.raises(ValueError):
            SynthSpec(seed=0, n_aspects=0)
        with pytest.raises(ValueError):
            SynthSpec(seed=0, density=0.0)
        with pytest.raises(ValueError):
            SynthSpec(seed=0, aspects_per_user=30, n_aspects=8)

    def test_interactions_per_user(self):
        assert SynthSpec(seed=0, **SMALL).interactions_per_user == 5


class TestGenerate:
    def test_interaction_count_by_enumeration(self):
        corpus, truth = generate(SynthSpec(seed=1, **SMALL))
        # 20 users x round(0.1 * 50) interactions each
        assert len(corpus.records) == 20 * 5
        assert len(truth.drivers) == 100

    def test_same_seed_identical_bytes(self, tmp_path):
        for run in ("one", "two"):
            corpus, _ = generate(SynthSpec(seed=7, **SMALL))
            cp.write_interactions(corpus, tmp_path / f"{run}.tsv")
        assert (tmp_path / "one.tsv").read_bytes() == \
               (tmp_path / "two.tsv").read_bytes()

    def test_every_interaction_has_drivers(self):
        corpus, truth = generate(SynthSpec(seed=2, **SMALL))
        for rec in corpus.records:
            driver = truth.drivers[(rec.user, rec.item)]
            assert len(driver) > 0
            assert set(driver) <= set(truth.preferred[rec.user])
            assert set(driver) <= set(truth.quality[rec.item])

    def test_driver_sets_are_intersections(self):
        _, truth = generate(SynthSpec(seed=3, **SMALL))
        for (user, item), driver in truth.drivers.items():
            expected = sorted(set(truth.preferred[user]) &
                              set(truth.quality[item]))
            assert list(driver) == expected

    def test_disjoint_pairs_never_generated(self):
        _, truth = generate(SynthSpec(seed=4, **SMALL))
        for (user, item) in truth.drivers:
            assert set(truth.preferred[user]) & set(truth.quality[item])

    def test_infeasible_density(self):
        spec = SynthSpec(seed=5, n_users=5, n_items=40, n_aspects=20,
                         aspects_per_user=1, aspects_per_item=1, density=0.9)
        with pytest.raises(InfeasibleSpecError):
            generate(spec)

    def test_noiseless_truth_matches_ground_truth_vectors(self):
        # density 0.14 -> 7 interactions per user, enough to hold out 5
        spec = SynthSpec(seed=6, **{**SMALL, "density": 0.14}, noise=0.0)
        corpus, truth = generate(spec)
        split = cp.holdout_split(corpus)
        gt = mx.ground_truth(corpus, split)
        gold = oracle_explanations(truth)
        assert gt  # the split must leave evaluable users
        for (user, item), vec in gt.items():
            assert set(np.nonzero(vec.aspects)[0]) == set(gold[(user, item)])

    def test_noise_adds_off_driver_mentions(self):
        noisy = SynthSpec(seed=6, **SMALL, noise=0.5)
        corpus, truth = generate(noisy)
        extra = 0
        for rec in corpus.records:
            driver = set(truth.drivers[(rec.user, rec.item)])
            extra += sum(1 for a, _ in rec.mentions if a not in driver)
        assert extra > 0

    def test_matrices_respect_range_laws(self):
        corpus, _ = generate(SynthSpec(seed=8, **SMALL))
        split = cp.holdout_split(corpus)
        mats = cp.build_matrices(corpus, split)
        for mat in (mats.X, mats.Y):
            nz = mat[mat != 0]
            assert np.all((nz > 1.0) & (nz < corpus.rating_scale))

    def test_default_scale_users_are_evaluable(self):
        corpus, _ = generate(SynthSpec(seed=9))
        split = cp.holdout_split(corpus)
        assert all(split.evaluable)
        assert all(len(t) == 5 for t in split.test_items)

    def test_roundtrip_through_interaction_file(self, tmp_path):
        # the file only records interactions, so re-ingesting drops items
        # nobody touched and re-indexes by first appearance; record content
        # keyed by original ids must survive exactly
        corpus, _ = generate(SynthSpec(seed=10, **SMALL))
        path = tmp_path / "synth.tsv"
        cp.write_interactions(corpus, path)
        again = cp.ingest(path)
        assert again.m == corpus.m
        assert len(again.records) == len(corpus.records)

        def keyed(c):
            return {
                (c.user_ids[rec.user], c.item_ids[rec.item]):
                (rec.rating, rec.timestamp,
                 [(c.catalog.names[a], s) for a, s in rec.mentions])
                for rec in c.records
            }

        assert keyed(again) == keyed(corpus)


class TestTruthFile:
    def test_truth_file_format(self, tmp_path):
        corpus, truth = generate(SynthSpec(seed=11, **SMALL))
        path = tmp_path / "truth.tsv"
        write_truth(corpus, truth, path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(truth.drivers)
        user_id, item_id, names = lines[0].split("\t")
        assert user_id.startswith("u") and item_id.startswith("i")
        assert all(name in corpus.catalog.names for name in names.split(","))
