"""Tests for ranking metrics, the evaluation protocol, masking, and variants."""

import math

import numpy as np
import pytest

from modalrec import corpus, evaluation as ev
from modalrec.corpus import EvalInstance, Interaction, ModalityStore, StoreSet
from modalrec.errors import ConfigError, FormatError


class TestRankOfTarget:
    def test_basic_ranks(self):
        scores = np.array([0.1, 0.9, 0.5])
        assert ev.rank_of_target(scores, 1) == 1
        assert ev.rank_of_target(scores, 2) == 2
        assert ev.rank_of_target(scores, 0) == 3

    def test_ties_break_by_ascending_index(self):
        scores = np.array([0.5, 0.5, 0.5])
        assert ev.rank_of_target(scores, 0) == 1
        assert ev.rank_of_target(scores, 1) == 2
        assert ev.rank_of_target(scores, 2) == 3

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            ev.rank_of_target(np.array([1.0]), 1)

    def test_matches_full_sort_oracle(self):
        # 1000 random vectors, ties injected by rounding, against a stable
        # argsort by (-score, index)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            scores = np.round(rng.normal(size=n), 1)
            order = sorted(range(n), key=lambda i: (-scores[i], i))
            target = int(rng.integers(n))
            assert ev.rank_of_target(scores, target) == order.index(target) + 1


class TestMetrics:
    def test_recall_values(self):
        assert ev.recall_at_k([1, 3, 10], 5) == pytest.approx(2 / 3)
        assert ev.recall_at_k(1, 1) == 1.0
        assert ev.recall_at_k(2, 1) == 0.0

    def test_ndcg_values(self):
        assert ev.ndcg_at_k(3, 5) == pytest.approx(0.5)
        assert ev.ndcg_at_k(4, 5) == pytest.approx(0.43067655807339306)
        assert ev.ndcg_at_k(1, 5) == 1.0
        assert ev.ndcg_at_k(6, 5) == 0.0

    def test_ndcg_mean_over_users(self):
        got = ev.ndcg_at_k([1, 3, 100], 10)
        assert got == pytest.approx((1.0 + 0.5 + 0.0) / 3)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        ranks = rng.integers(1, 40, size=50)
        recalls = [ev.recall_at_k(ranks, k) for k in range(1, 41)]
        ndcgs = [ev.ndcg_at_k(ranks, k) for k in range(1, 41)]
        assert recalls == sorted(recalls)
        assert ndcgs == sorted(ndcgs)

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            ev.recall_at_k([1], 0)
        with pytest.raises(ConfigError):
            ev.ndcg_at_k([0], 5)
        with pytest.raises(ConfigError):
            ev.recall_at_k([], 5)


class TestEvaluate:
    def make_instances(self):
        return [EvalInstance("u1", ("a",), ("a",), "b"),
                EvalInstance("u2", ("b",), ("b",), "c"),
                EvalInstance("u3", ("c",), ("c",), "a")]

    def test_matches_exhaustive_oracle(self):
        # three hand-built users with forced scores; expectations computed
        # by explicitly sorting each row
        instances = self.make_instances()
        item_index = {"a": 0, "b": 1, "c": 2}
        rows = np.array([[0.1, 0.7, 0.2],    # target b -> rank 1
                         [0.4, 0.4, 0.3],    # target c -> rank 3
                         [0.5, 0.6, 0.9]])   # target a -> rank 3

        report = ev.evaluate(instances, lambda _: rows, item_index, ks=(1, 2, 3))
        assert report.n_users == 3
        assert report.recalls[1] == pytest.approx(1 / 3)
        assert report.recalls[3] == pytest.approx(1.0)
        expected_ndcg3 = (1.0 + 1 / math.log2(4) + 1 / math.log2(4)) / 3
        assert report.ndcgs[3] == pytest.approx(expected_ndcg3)

    def test_deterministic(self):
        instances = self.make_instances()
        item_index = {"a": 0, "b": 1, "c": 2}
        rng = np.random.default_rng(2)
        rows = rng.normal(size=(3, 3))
        a = ev.evaluate(instances, lambda _: rows, item_index)
        b = ev.evaluate(instances, lambda _: rows, item_index)
        assert a == b

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            ev.evaluate([], lambda _: np.zeros((0, 3)), {"a": 0})

    def test_scorer_shape_checked(self):
        instances = self.make_instances()
        with pytest.raises(ConfigError):
            ev.evaluate(instances, lambda _: np.zeros((3, 7)),
                        {"a": 0, "b": 1, "c": 2})


class TestMetricTsv:
    def test_round_trip(self):
        report = ev.MetricReport(recalls={5: 0.125, 10: 0.25},
                                 ndcgs={5: 0.1, 10: 0.2}, n_users=42)
        text = report.to_tsv(config_echo='{"seed":7}')
        parsed, echo = ev.parse_metric_tsv(text)
        assert parsed == report
        assert echo == '{"seed":7}'

    def test_six_decimal_format(self):
        report = ev.MetricReport(recalls={10: 1 / 3}, ndcgs={10: 2 / 3},
                                 n_users=3)
        assert "recall@10\t0.333333" in report.to_tsv()
        assert "ndcg@10\t0.666667" in report.to_tsv()

    def test_unknown_row_rejected(self):
        with pytest.raises(FormatError):
            ev.parse_metric_tsv("precision@5\t0.5\n")


class TestEarlyStop:
    def test_flat_stream_stops_after_patience_plus_one(self):
        state = ev.EarlyStopState(patience=10)
        stops = [ev.early_stop_update(state, 0.5) for _ in range(11)]
        assert stops == [False] * 10 + [True]
        assert state.n_updates == 11
        assert state.best_epoch == 1

    def test_increasing_never_stops(self):
        state = ev.EarlyStopState(patience=3)
        assert not any(ev.early_stop_update(state, 0.1 * i)
                       for i in range(1, 30))
        assert state.best_epoch == 29

    def test_best_is_retained(self):
        state = ev.EarlyStopState(patience=2)
        for value in (0.1, 0.4, 0.2, 0.3):
            ev.early_stop_update(state, value)
        assert state.best == pytest.approx(0.4)
        assert state.best_epoch == 2

    def test_tie_does_not_reset(self):
        state = ev.EarlyStopState(patience=2)
        ev.early_stop_update(state, 0.5)
        assert not ev.early_stop_update(state, 0.5)
        assert ev.early_stop_update(state, 0.5)

    def test_bad_patience(self):
        with pytest.raises(ConfigError):
            ev.EarlyStopState(patience=0)


def make_store_set(n_items=7, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    stores = {}
    for modality in corpus.MODALITIES:
        store = ModalityStore(dim=dim)
        for k in range(n_items):
            store.vectors[f"i{k}"] = rng.normal(size=dim)
        stores[modality] = store
    return StoreSet(**stores)


class TestModalityMask:
    def test_zero_ratio_identity(self):
        stores = make_store_set()
        masked = ev.modality_mask(stores, "text", 0.0, seed=1)
        assert masked.text.vectors == stores.text.vectors

    def test_full_ratio_empties_store(self):
        stores = make_store_set()
        masked = ev.modality_mask(stores, "image", 1.0, seed=1)
        assert len(masked.image) == 0
        assert len(masked.text) == 7  # other modalities untouched
        assert len(masked.cross) == 7

    def test_floor_of_ratio_times_present(self):
        stores = make_store_set(n_items=7)
        masked = ev.modality_mask(stores, "text", 0.5, seed=2)
        assert len(masked.text) == 7 - math.floor(0.5 * 7)

    def test_deterministic_and_seed_sensitive(self):
        stores = make_store_set(n_items=40)
        a = ev.modality_mask(stores, "cross", 0.5, seed=3)
        b = ev.modality_mask(stores, "cross", 0.5, seed=3)
        c = ev.modality_mask(stores, "cross", 0.5, seed=4)
        assert set(a.cross.vectors) == set(b.cross.vectors)
        assert set(a.cross.vectors) != set(c.cross.vectors)

    def test_source_not_mutated(self):
        stores = make_store_set()
        ev.modality_mask(stores, "text", 1.0, seed=5)
        assert len(stores.text) == 7

    def test_bad_ratio(self):
        with pytest.raises(ConfigError):
            ev.modality_mask(make_store_set(), "text", 1.5, seed=0)


def make_finetune_data():
    recs = []
    # u1 trains on t0 x3 + t1; u2 trains on t1; both then valid/test events
    for t, item in enumerate(["t0", "t0", "t0", "t1", "t2", "t3"]):
        recs.append(Interaction("u1", item, "dt", t))
    for t, item in enumerate(["t1", "t2", "t0"]):
        recs.append(Interaction("u2", item, "dt", t))
    return corpus.build_finetune_data(recs, [], "dt", make_store_set())


class TestPopularity:
    def test_train_frequencies(self):
        data = make_finetune_data()
        freqs = ev.train_frequencies(data)
        assert freqs == {"t0": 3, "t1": 2, "t2": 0, "t3": 0}

    def test_popularity_scorer_ranks_frequent_first(self):
        data = make_finetune_data()
        scorer = ev.popularity_scorer(data)
        instances = corpus.build_eval_instances(data, "test", 50)
        scores = scorer(instances)
        assert scores.shape == (2, len(data.vocab))
        assert scores[0, data.item_index["t0"]] == 3.0

    def test_group_membership_and_partition(self):
        freqs = {"a": 0, "b": 5, "c": 20, "d": 50, "e": 7}
        results = [("a", 1), ("b", 2), ("c", 3), ("d", 4), ("e", 5)]
        report = ev.popularity_group_report(results, freqs, bounds=(0, 5, 20, 50))
        assert set(report.groups) == {"[0,5)", "[5,20)", "[20,50)", "[50,inf)"}
        assert report.groups["[5,20)"].n_users == 2  # b and e
        assert sum(g.n_users for g in report.groups.values()) == len(results)

    def test_empty_groups_omitted(self):
        report = ev.popularity_group_report([("a", 1)], {"a": 100})
        assert list(report.groups) == ["[50,inf)"]

    def test_improvement_ratio(self):
        ours = [("a", 1)]  # ndcg@5 = 1.0
        base = {"[0,5)": ev.MetricReport(recalls={5: 0.5}, ndcgs={5: 0.8},
                                         n_users=1)}
        report = ev.popularity_group_report(ours, {"a": 0}, ks=(5,),
                                            baseline=base)
        assert report.improvement["[0,5)"]["ndcg@5"] == pytest.approx(0.25)

    def test_bad_bounds(self):
        with pytest.raises(ConfigError):
            ev.popularity_group_report([("a", 1)], {"a": 0}, bounds=(5, 5, 20))


class TestVariants:
    def test_catalog(self):
        assert len(ev.VARIANTS) == 9
        full = ev.variant_by_name("full")
        assert full.plain == frozenset() and full.use_mix and full.use_id \
            and full.pretrain
        assert ev.variant_by_name("wo_cvt").plain == frozenset(
            {"text", "image", "cross"})
        assert not ev.variant_by_name("wo_mix").use_mix
        assert not ev.variant_by_name("wo_id").use_id
        assert not ev.variant_by_name("wo_cl").pretrain

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ev.variant_by_name("wo_everything")

    def test_bad_plain_modalities(self):
        with pytest.raises(ConfigError):
            ev.VariantSpec(plain=frozenset({"audio"}))
