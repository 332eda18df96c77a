"""Metric, tuning and analysis contracts, checked against hand-worked
examples and rank-invariance properties."""

import numpy as np
import pytest

from uhdsparse.errors import DataError
from uhdsparse.evaluation import (
    build_run,
    density_profile,
    ideal_layer_oracle,
    interpret_dimensions,
    mrr_at,
    read_qrels,
    read_run,
    recall_at,
    tune_bucket_weights,
    write_qrels,
    write_run,
)
from uhdsparse.sparse import BucketDescriptor, BucketedRepresentation, SparseVector


def _two_bucket_rep(first: dict[int, float], second: dict[int, float], n: int = 8):
    return BucketedRepresentation(
        (
            (BucketDescriptor(1, 1, n), SparseVector.from_dict(n, first)),
            (BucketDescriptor(2, 1, n), SparseVector.from_dict(n, second)),
        )
    )


def _one_bucket_rep(weights: dict[int, float], n: int = 8):
    return BucketedRepresentation(
        ((BucketDescriptor(1, 1, n), SparseVector.from_dict(n, weights)),)
    )


class TestQrelsIO:
    def test_round_trip(self, tmp_path):
        qrels = {"q1": {"d1", "d3"}, "q2": {"d2"}}
        path = tmp_path / "qrels.txt"
        write_qrels(qrels, path)
        assert read_qrels(path) == qrels

    def test_zero_relevance_excluded(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 1\nq1 0 d2 0\n", encoding="utf-8")
        assert read_qrels(path) == {"q1": {"d1"}}

    def test_field_count_checked(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1\n", encoding="utf-8")
        with pytest.raises(DataError, match=":1:"):
            read_qrels(path)

    def test_bad_relevance_value(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 maybe\n", encoding="utf-8")
        with pytest.raises(DataError, match="relevance"):
            read_qrels(path)


class TestRunIO:
    def test_build_run_breaks_ties_by_doc_id(self):
        run = build_run({"q1": [("dz", 1.0), ("da", 1.0), ("dm", 2.0)]})
        assert [d for d, _ in run["q1"]] == ["dm", "da", "dz"]

    def test_round_trip(self, tmp_path):
        run = build_run({"q1": [("d1", 0.9), ("d2", 0.5)], "q2": [("d3", 0.1)]})
        path = tmp_path / "run.txt"
        write_run(run, path, tag="test")
        loaded = read_run(path)
        assert [d for d, _ in loaded["q1"]] == ["d1", "d2"]
        assert loaded["q1"][0][1] == pytest.approx(0.9)

    def test_rank_gap_rejected(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("q1 Q0 d1 1 0.9 t\nq1 Q0 d2 3 0.5 t\n", encoding="utf-8")
        with pytest.raises(DataError, match="contiguity"):
            read_run(path)

    def test_increasing_score_rejected(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("q1 Q0 d1 1 0.5 t\nq1 Q0 d2 2 0.9 t\n", encoding="utf-8")
        with pytest.raises(DataError, match="increases"):
            read_run(path)


class TestMrr:
    def test_first_relevant_at_rank_three(self):
        run = {"q": [("a", 3.0), ("b", 2.0), ("c", 1.0)]}
        assert mrr_at(run, {"q": {"c"}}) == pytest.approx(1 / 3)

    def test_relevant_outside_cutoff_scores_zero(self):
        run = {"q": [(f"d{i}", float(-i)) for i in range(11)]}
        assert mrr_at(run, {"q": {"d10"}}, cutoff=10) == 0.0

    def test_two_query_mean(self):
        run = {
            "q1": [("a", 2.0), ("b", 1.0)],
            "q2": [("c", 2.0), ("d", 1.0)],
        }
        qrels = {"q1": {"a"}, "q2": {"d"}}
        assert mrr_at(run, qrels) == pytest.approx(0.75)

    def test_unknown_query_skipped_with_warning(self):
        run = {"q1": [("a", 1.0)], "mystery": [("b", 1.0)]}
        with pytest.warns(UserWarning, match="skipped 1"):
            value = mrr_at(run, {"q1": {"a"}})
        assert value == pytest.approx(1.0)

    def test_bad_cutoff(self):
        with pytest.raises(ValueError):
            mrr_at({}, {}, cutoff=0)


class TestRecall:
    def test_all_relevant_retrieved(self):
        run = {"q": [("a", 2.0), ("b", 1.0)]}
        assert recall_at(run, {"q": {"a", "b"}}, cutoff=5) == 1.0

    def test_none_retrieved(self):
        run = {"q": [("a", 2.0)]}
        assert recall_at(run, {"q": {"z"}}, cutoff=5) == 0.0

    def test_half_retrieved(self):
        run = {"q": [("a", 2.0), ("b", 1.0)]}
        assert recall_at(run, {"q": {"a", "z"}}, cutoff=5) == 0.5

    def test_nondecreasing_in_cutoff(self):
        rng = np.random.default_rng(9)
        docs = [f"d{i}" for i in range(30)]
        run = build_run(
            {"q": [(d, float(rng.normal())) for d in docs]}
        )
        qrels = {"q": set(rng.choice(docs, size=6, replace=False).tolist())}
        values = [recall_at(run, qrels, cutoff=c) for c in range(1, 31)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert values[-1] == 1.0


class TestRankInvariance:
    def test_metrics_ignore_monotone_score_transforms(self):
        """MRR and recall depend only on the ordering, so any strictly
        increasing transform of the scores leaves them unchanged."""
        rng = np.random.default_rng(21)
        docs = [f"d{i}" for i in range(20)]
        scored = {f"q{j}": [(d, float(rng.normal())) for d in docs] for j in range(4)}
        qrels = {
            f"q{j}": set(rng.choice(docs, size=3, replace=False).tolist())
            for j in range(4)
        }
        base_run = build_run(scored)
        transformed = build_run(
            {
                qid: [(d, float(np.exp(0.5 * s) + 7)) for d, s in pairs]
                for qid, pairs in scored.items()
            }
        )
        assert mrr_at(base_run, qrels) == mrr_at(transformed, qrels)
        assert recall_at(base_run, qrels, 5) == recall_at(transformed, qrels, 5)


class TestTuneBucketWeights:
    def _fixture(self):
        """Bucket 0 ranks the positive first; bucket 1 is pure noise that
        outranks it when mixed in."""
        queries = {
            "q1": _two_bucket_rep({0: 1.0}, {4: 1.0}),
            "q2": _two_bucket_rep({1: 1.0}, {5: 1.0}),
        }
        docs = {
            "pos1": _two_bucket_rep({0: 1.0}, {6: 1.0}),
            "pos2": _two_bucket_rep({1: 1.0}, {7: 1.0}),
            "noise": _two_bucket_rep({2: 0.5}, {4: 2.0, 5: 2.0}),
        }
        candidates = {"q1": ["pos1", "noise"], "q2": ["pos2", "noise"]}
        qrels = {"q1": {"pos1"}, "q2": {"pos2"}}
        return candidates, queries, docs, qrels

    def test_noise_bucket_zeroed(self):
        candidates, queries, docs, qrels = self._fixture()
        result = tune_bucket_weights(
            candidates, queries, docs, qrels, grid=[(0.0, 1.0), (0.0, 1.0)]
        )
        assert result.weights == (1.0, 0.0)
        assert result.mrr == pytest.approx(1.0)

    def test_uniform_grid_returns_all_ones(self):
        candidates, queries, docs, qrels = self._fixture()
        result = tune_bucket_weights(
            candidates, queries, docs, qrels, grid=[(1.0,), (1.0,)]
        )
        assert result.weights == (1.0, 1.0)

    def test_tie_prefers_lexicographically_smaller(self):
        """Both buckets alone rank perfectly, so (x, 0) grid points tie
        with (0, y) and the search must keep the smallest vector."""
        queries = {"q1": _two_bucket_rep({0: 1.0}, {4: 1.0})}
        docs = {
            "pos": _two_bucket_rep({0: 1.0}, {4: 1.0}),
            "other": _two_bucket_rep({1: 1.0}, {5: 1.0}),
        }
        result = tune_bucket_weights(
            {"q1": ["pos", "other"]}, queries, docs, {"q1": {"pos"}}
        )
        assert result.weights == (0.0, 1.0 / 3.0)

    def test_beats_or_matches_all_ones(self):
        rng = np.random.default_rng(4)
        queries, docs, candidates, qrels = {}, {}, {}, {}
        names = [f"d{i}" for i in range(12)]
        for i, docid in enumerate(names):
            docs[docid] = _two_bucket_rep(
                {i % 8: 1.0}, {int(rng.integers(8)): float(rng.uniform(0.2, 2.0))}
            )
        for j in range(5):
            qid = f"q{j}"
            target = names[j]
            queries[qid] = _two_bucket_rep({j % 8: 1.0}, {int(rng.integers(8)): 1.0})
            candidates[qid] = names
            qrels[qid] = {target}
        tuned = tune_bucket_weights(candidates, queries, docs, qrels)
        ones = tune_bucket_weights(
            candidates, queries, docs, qrels, grid=[(1.0,), (1.0,)]
        )
        assert tuned.mrr >= ones.mrr

    def test_combination_guard(self):
        candidates, queries, docs, qrels = self._fixture()
        huge = [tuple(np.linspace(0, 1, 4000)), tuple(np.linspace(0, 1, 4000))]
        with pytest.raises(ValueError, match="combinations"):
            tune_bucket_weights(candidates, queries, docs, qrels, grid=huge)

    def test_all_zero_grid_rejected(self):
        candidates, queries, docs, qrels = self._fixture()
        with pytest.raises(ValueError, match="nonzero"):
            tune_bucket_weights(
                candidates, queries, docs, qrels, grid=[(0.0,), (0.0,)]
            )

    def test_axis_count_checked(self):
        candidates, queries, docs, qrels = self._fixture()
        with pytest.raises(ValueError, match="axis"):
            tune_bucket_weights(candidates, queries, docs, qrels, grid=[(1.0,)])


class TestIdealLayerOracle:
    def test_complementary_buckets_reach_one(self):
        """Bucket 0 nails q1 and bucket 1 nails q2; choosing per query
        gives a perfect oracle."""
        queries = {
            "q1": _two_bucket_rep({0: 1.0}, {4: 1.0}),
            "q2": _two_bucket_rep({1: 1.0}, {5: 1.0}),
        }
        docs = {
            "t1": _two_bucket_rep({0: 1.0}, {6: 0.1}),
            "t2": _two_bucket_rep({2: 1.0}, {5: 1.0}),
            "x": _two_bucket_rep({1: 0.9}, {4: 0.9, 5: 0.9}),
        }
        candidates = {"q1": ["t1", "t2", "x"], "q2": ["t1", "t2", "x"]}
        qrels = {"q1": {"t1"}, "q2": {"t2"}}
        oracle, choices = ideal_layer_oracle(candidates, queries, docs, qrels)
        assert oracle == pytest.approx(1.0)
        assert choices == {"q1": 0, "q2": 1}

    def test_identical_buckets_match_single(self):
        queries = {"q1": _two_bucket_rep({0: 1.0, 1: 0.5}, {0: 1.0, 1: 0.5})}
        docs = {
            "a": _two_bucket_rep({0: 1.0}, {0: 1.0}),
            "b": _two_bucket_rep({1: 1.0}, {1: 1.0}),
        }
        candidates = {"q1": ["a", "b"]}
        oracle, choices = ideal_layer_oracle(candidates, queries, docs, {"q1": {"b"}})
        assert oracle == pytest.approx(0.5)
        assert choices["q1"] == 0  # tie resolves to the first bucket

    def test_dominates_every_fixed_bucket(self):
        rng = np.random.default_rng(17)
        names = [f"d{i}" for i in range(15)]
        docs = {
            d: _two_bucket_rep(
                {int(rng.integers(8)): float(rng.uniform(0.1, 1))},
                {int(rng.integers(8)): float(rng.uniform(0.1, 1))},
            )
            for d in names
        }
        queries, candidates, qrels = {}, {}, {}
        for j in range(6):
            qid = f"q{j}"
            queries[qid] = _two_bucket_rep(
                {int(rng.integers(8)): 1.0}, {int(rng.integers(8)): 1.0}
            )
            candidates[qid] = names
            qrels[qid] = {names[int(rng.integers(len(names)))]}
        oracle, _ = ideal_layer_oracle(candidates, queries, docs, qrels)
        for b in range(2):
            weights = [(1.0,) if i == b else (0.0,) for i in range(2)]
            # Degenerate single-bucket grids need the other axis at zero.
            weights[b] = (1.0,)
            fixed = tune_bucket_weights(
                candidates, queries, docs, qrels, grid=weights
            )
            assert oracle >= fixed.mrr - 1e-12

    def test_needs_two_buckets(self):
        queries = {"q1": _one_bucket_rep({0: 1.0})}
        docs = {"a": _one_bucket_rep({0: 1.0})}
        with pytest.raises(ValueError, match="2 buckets"):
            ideal_layer_oracle({"q1": ["a"]}, queries, docs, {"q1": {"a"}})


class TestDensityProfile:
    def test_hand_means(self):
        reps = [
            (1, _one_bucket_rep({0: 1.0})),              # density 1/8
            (1, _one_bucket_rep({0: 1.0, 1: 1.0, 2: 1.0})),  # 3/8
            (3, _one_bucket_rep({0: 1.0, 1: 1.0})),      # 2/8
        ]
        table = density_profile(reps)
        assert table[1] == pytest.approx(0.25)
        assert table[3] == pytest.approx(0.25)
        assert list(table) == [1, 3]

    def test_multi_bucket_uses_total_width(self):
        rep = _two_bucket_rep({0: 1.0}, {1: 1.0, 2: 1.0})
        table = density_profile([(2, rep)])
        assert table[2] == pytest.approx(3 / 16)


class TestInterpretDimensions:
    def test_exclusive_dimension_lists_its_term(self):
        queries = []
        for i in range(6):
            queries.append((["apple", f"filler{i}"], _one_bucket_rep({2: 1.0})))
        for i in range(6):
            queries.append((["boat", f"filler{i}"], _one_bucket_rep({5: 1.0})))
        table = interpret_dimensions(queries, min_term_count=5)
        assert table[(0, 2)] == [("apple", 6)]
        assert table[(0, 5)] == [("boat", 6)]

    def test_threshold_filters_rare_terms(self):
        queries = [(["rare"], _one_bucket_rep({1: 1.0})) for _ in range(4)]
        assert interpret_dimensions(queries, min_term_count=5) == {}
        assert interpret_dimensions(queries, min_term_count=4)[(0, 1)] == [("rare", 4)]

    def test_unactivated_dimension_absent(self):
        queries = [(["word"] * 3, _one_bucket_rep({1: 1.0})) for _ in range(5)]
        table = interpret_dimensions(queries)
        assert (0, 7) not in table

    def test_duplicate_terms_count_once_per_query(self):
        queries = [(["echo", "echo", "echo"], _one_bucket_rep({3: 1.0})) for _ in range(5)]
        assert interpret_dimensions(queries)[(0, 3)] == [("echo", 5)]

    def test_ranking_by_count_then_alphabet(self):
        queries = [(["zeta", "alpha"], _one_bucket_rep({0: 1.0})) for _ in range(5)]
        queries += [(["alpha"], _one_bucket_rep({0: 1.0}))]
        table = interpret_dimensions(queries)
        assert table[(0, 0)] == [("alpha", 6), ("zeta", 5)]
