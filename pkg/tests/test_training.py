"""Trainer mechanics: triples, config parsing, the hinge loss and its
batch form, the optimizer, and the end-to-end loop contracts."""

import numpy as np
import pytest

from uhdsparse.errors import DataError, TrainingDivergedError
from uhdsparse.sparse import BucketDescriptor, BucketedRepresentation, SparseVector
from uhdsparse.training import (
    AdamW,
    TrainConfig,
    TrainingTriple,
    batch_loss,
    hinge_loss,
    load_triples,
    train,
)


def _rep(weights_by_dim: dict[int, float], n: int = 16) -> BucketedRepresentation:
    vec = SparseVector.from_dict(n, weights_by_dim)
    return BucketedRepresentation(((BucketDescriptor(1, 1, n), vec),))


def _toy_triples(count: int = 12) -> list[TrainingTriple]:
    topics = ["apple orchard fruit", "river boat hull", "stone wall mason"]
    out = []
    for i in range(count):
        topic = topics[i % len(topics)]
        out.append(
            TrainingTriple(
                f"find {topic.split()[0]} {i}",
                f"passage about {topic} number {i}",
                f"unrelated filler text {i}",
            )
        )
    return out


def _small_config(**overrides) -> TrainConfig:
    base = dict(
        h=8,
        n=64,
        k=4,
        weight_sparsity=0.3,
        layers=(2,),
        mode="single",
        batch_size=4,
        steps=5,
        lr=1e-3,
        warmup_steps=2,
        seed=7,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestTriples:
    def test_empty_query_rejected(self):
        with pytest.raises(DataError):
            TrainingTriple("  ", "positive text")

    def test_empty_positive_rejected(self):
        with pytest.raises(DataError):
            TrainingTriple("query", "")

    def test_negative_may_be_empty(self):
        t = TrainingTriple("query", "positive", "")
        assert t.negative == ""

    def test_load_round_trip(self, tmp_path):
        p = tmp_path / "triples.tsv"
        p.write_text("q one\tpos one\tneg one\nq two\tpos two\t\n", encoding="utf-8")
        triples = load_triples(p)
        assert len(triples) == 2
        assert triples[0].positive == "pos one"
        assert triples[1].negative == ""

    def test_load_skips_blank_lines(self, tmp_path):
        p = tmp_path / "triples.tsv"
        p.write_text("q\tp\tn\n\nq2\tp2\tn2\n", encoding="utf-8")
        assert len(load_triples(p)) == 2

    def test_load_reports_line_number_on_field_count(self, tmp_path):
        p = tmp_path / "triples.tsv"
        p.write_text("q\tp\tn\nonly two\tfields\n", encoding="utf-8")
        with pytest.raises(DataError, match=":2:"):
            load_triples(p)

    def test_load_reports_line_number_on_empty_query(self, tmp_path):
        p = tmp_path / "triples.tsv"
        p.write_text("\tp\tn\n", encoding="utf-8")
        with pytest.raises(DataError, match=":1:"):
            load_triples(p)


class TestTrainConfig:
    def test_from_dict_happy_path(self):
        cfg = TrainConfig.from_dict(
            dict(
                h=8, n=64, k=4, weight_sparsity=0.3, layers=[1, 2], mode="vertical",
                batch_size=4, steps=10, lr=1e-3, warmup_steps=2, seed=1,
            )
        )
        assert cfg.layers == (1, 2)
        assert cfg.encoder_depth == 2

    def test_missing_key_named(self):
        with pytest.raises(ValueError, match="seed"):
            TrainConfig.from_dict(
                dict(
                    h=8, n=64, k=4, weight_sparsity=0.3, layers=[1], mode="single",
                    batch_size=4, steps=10, lr=1e-3, warmup_steps=2,
                )
            )

    def test_unknown_key_named(self):
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig.from_dict(
                dict(
                    h=8, n=64, k=4, weight_sparsity=0.3, layers=[1], mode="single",
                    batch_size=4, steps=10, lr=1e-3, warmup_steps=2, seed=1,
                    momentum=0.9,
                )
            )

    def test_batch_size_below_two_rejected(self):
        with pytest.raises(ValueError, match="batch size"):
            _small_config(batch_size=1)

    def test_single_mode_takes_one_layer(self):
        with pytest.raises(ValueError):
            _small_config(mode="single", layers=(1, 2))

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            _small_config(mode="diagonal")

    def test_build_plan_modes(self):
        rng = np.random.default_rng(0)
        vertical = _small_config(mode="vertical", layers=(1, 3)).build_plan(rng)
        assert vertical.mode == "vertical"
        assert [e.layer_index for e in vertical] == [1, 3]
        horizontal = _small_config(mode="horizontal", aspects=3).build_plan(rng)
        assert len(horizontal) == 3
        assert {e.aspect_index for e in horizontal} == {1, 2, 3}


class TestHingeLoss:
    def test_equal_scores_sit_on_the_margin(self):
        assert hinge_loss(0.4, 0.4) == 1.0

    def test_satisfied_margin_is_zero(self):
        assert hinge_loss(1.2, 0.1) == 0.0
        assert hinge_loss(2.0, 1.0) == 0.0

    def test_hand_value(self):
        assert hinge_loss(0.6, 0.3) == pytest.approx(0.7)

    def test_nonnegative_and_lipschitz(self):
        """|hinge(a+da, b) - hinge(a, b)| <= |da| and likewise in b."""
        rng = np.random.default_rng(42)
        for _ in range(200):
            a, b = rng.normal(size=2)
            da, db = rng.normal(size=2) * 0.1
            base = hinge_loss(a, b)
            assert base >= 0.0
            assert abs(hinge_loss(a + da, b) - base) <= abs(da) + 1e-12
            assert abs(hinge_loss(a, b + db) - base) <= abs(db) + 1e-12


class TestBatchLoss:
    def test_requires_two_pairs(self):
        r = _rep({0: 1.0})
        with pytest.raises(ValueError):
            batch_loss([r], [r])

    def test_requires_aligned_lists(self):
        r = _rep({0: 1.0})
        with pytest.raises(ValueError):
            batch_loss([r, r], [r])

    def test_orthogonal_cross_pairs_give_zero(self):
        """With unit positives and orthogonal cross pairs every margin is
        exactly met, so the mean over the 2 hinge terms is zero."""
        q = [_rep({0: 1.0}), _rep({1: 1.0})]
        d = [_rep({0: 1.0}), _rep({1: 1.0})]
        report = batch_loss(q, d)
        assert report.mean_loss == 0.0
        assert report.active_pairs == 0
        assert report.mean_pos == pytest.approx(1.0)
        assert report.mean_neg == pytest.approx(0.0)

    def test_identical_representations_give_one(self):
        r = _rep({0: 0.6, 3: 0.8})
        report = batch_loss([r, r, r], [r, r, r])
        assert report.mean_loss == pytest.approx(1.0)
        assert report.active_pairs == 6

    def test_three_pair_hand_enumeration(self):
        """Six hinge terms enumerated by hand from unit basis vectors.

        rel(q_i, d_j) = 1 if i == j else 0, except q0 also overlaps d1
        by 0.5: terms are max(0, 1-1+0.5), four of max(0, 1-1+0) and
        max(0, 1-1+0) -> mean 0.5/6.
        """
        q = [_rep({0: 1.0}), _rep({1: 1.0}), _rep({2: 1.0})]
        d = [
            _rep({0: 1.0}),
            _rep({0: 0.5, 1: 1.0}),  # not unit norm, fine for hand math
            _rep({2: 1.0}),
        ]
        report = batch_loss(q, d)
        assert report.mean_loss == pytest.approx(0.5 / 6)
        assert report.active_pairs == 1

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        reps = []
        for _ in range(5):
            dims = rng.choice(16, size=4, replace=False)
            reps.append(_rep({int(d): float(rng.normal()) for d in dims}))
        docs = []
        for _ in range(5):
            dims = rng.choice(16, size=4, replace=False)
            docs.append(_rep({int(d): float(rng.normal()) for d in dims}))
        base = batch_loss(reps, docs).mean_loss
        for _ in range(5):
            perm = rng.permutation(5)
            shuffled = batch_loss(
                [reps[i] for i in perm], [docs[i] for i in perm]
            ).mean_loss
            np.testing.assert_allclose(shuffled, base, rtol=1e-12)


class TestAdamW:
    def test_zero_gradient_zero_decay_is_fixed_point(self):
        p = np.array([1.0, -2.0, 3.0])
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
        for _ in range(3):
            opt.apply({"p": np.zeros(3)})
        np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])

    def test_first_step_matches_hand_formula(self):
        """After one step m-hat = g and v-hat = g^2, so the update is
        lr * g / (|g| + eps) plus the decoupled decay term."""
        p = np.array([0.5, -0.5])
        g = np.array([0.2, -0.1])
        lr, wd = 0.01, 0.01
        opt = AdamW([("p", p.copy())], lr=lr, weight_decay=wd)
        opt.apply({"p": g})
        stepped = p - lr * g / (np.abs(g) + 1e-8)
        stepped -= lr * wd * stepped
        np.testing.assert_allclose(opt.params[0][1], stepped, rtol=1e-12)

    def test_warmup_ramp_and_linear_decay(self):
        opt = AdamW([("p", np.zeros(1))], lr=1.0, warmup_steps=4, total_steps=8)
        ramp = [opt.learning_rate(t) for t in range(1, 9)]
        np.testing.assert_allclose(
            ramp, [0.25, 0.5, 0.75, 1.0, 0.75, 0.5, 0.25, 0.0]
        )

    def test_constant_schedule_without_total(self):
        opt = AdamW([("p", np.zeros(1))], lr=0.3)
        assert opt.learning_rate(1) == 0.3
        assert opt.learning_rate(1000) == 0.3

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            AdamW([("p", np.zeros(1)), ("p", np.zeros(1))], lr=0.1)

    def test_decay_alone_shrinks_parameters(self):
        p = np.array([10.0])
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
        opt.apply({"p": np.zeros(1)})
        assert abs(p[0]) < 10.0


class TestTrainLoop:
    def test_zero_steps_returns_initialization(self):
        """No updates means the model equals what the seed initializes."""
        triples = _toy_triples()
        cfg = _small_config(steps=0)
        model_a, hist = train(triples, cfg)
        assert hist == []
        model_b, _ = train(triples, _small_config(steps=0))
        np.testing.assert_array_equal(
            model_a.plan.entries[0].wta.w, model_b.plan.entries[0].wta.w
        )
        np.testing.assert_array_equal(model_a.encoder.embedding, model_b.encoder.embedding)

    def test_same_seed_same_history_and_weights(self):
        triples = _toy_triples()
        model_a, hist_a = train(triples, _small_config())
        model_b, hist_b = train(triples, _small_config())
        assert [r.mean_loss for r in hist_a] == [r.mean_loss for r in hist_b]
        np.testing.assert_array_equal(
            model_a.plan.entries[0].wta.w, model_b.plan.entries[0].wta.w
        )
        np.testing.assert_array_equal(
            model_a.encoder.layers[0].w, model_b.encoder.layers[0].w
        )

    def test_different_seed_differs(self):
        triples = _toy_triples()
        model_a, _ = train(triples, _small_config(seed=7))
        model_b, _ = train(triples, _small_config(seed=8))
        assert not np.array_equal(
            model_a.plan.entries[0].wta.w, model_b.plan.entries[0].wta.w
        )

    def test_mask_survives_updates(self):
        """Severed weights stay exactly zero through optimizer steps."""
        triples = _toy_triples()
        model, _ = train(triples, _small_config(steps=8))
        for entry in model.plan:
            w, mask = entry.wta.w, entry.wta.mask
            np.testing.assert_array_equal(w[mask == 0.0], 0.0)

    def test_loss_log_written(self, tmp_path):
        log = tmp_path / "loss.csv"
        train(_toy_triples(), _small_config(steps=3), loss_log_path=log)
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "step,mean_loss,mean_pos,mean_neg"
        assert len(lines) == 4
        first = lines[1].split(",")
        assert first[0] == "1"
        float(first[1]), float(first[2]), float(first[3])

    def test_partial_batches_below_two_dropped(self):
        # 5 triples with batch 4 leaves a trailing batch of 1 per epoch.
        triples = _toy_triples(5)
        _, hist = train(triples, _small_config(steps=3, batch_size=4))
        assert len(hist) == 3
        assert [r.step for r in hist] == [1, 2, 3]

    def test_explicit_negatives_require_nonempty_negative(self):
        triples = [TrainingTriple("q one", "p one"), TrainingTriple("q two", "p two")]
        cfg = _small_config(explicit_negatives=True, batch_size=2, steps=1)
        with pytest.raises(DataError, match="negative"):
            train(triples, cfg)

    def test_explicit_negatives_run_and_change_updates(self):
        triples = _toy_triples()
        plain, _ = train(triples, _small_config(steps=4))
        with_neg, _ = train(
            triples, _small_config(steps=4, explicit_negatives=True)
        )
        assert not np.array_equal(
            plain.plan.entries[0].wta.w, with_neg.plan.entries[0].wta.w
        )

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_absurd_learning_rate_raises_diverged(self):
        triples = _toy_triples()
        cfg = _small_config(steps=50, lr=1e200, warmup_steps=0)
        with pytest.raises(TrainingDivergedError) as info:
            train(triples, cfg)
        assert info.value.step >= 1

    def test_empty_triples_rejected(self):
        with pytest.raises(DataError):
            train([], _small_config())

    def test_vertical_mode_trains_all_buckets(self):
        triples = _toy_triples()
        cfg = _small_config(mode="vertical", layers=(1, 2), steps=4)
        model, _ = train(triples, cfg)
        assert len(model.plan) == 2
        init_model, _ = train(triples, _small_config(mode="vertical", layers=(1, 2), steps=0))
        for trained, init in zip(model.plan, init_model.plan):
            assert not np.array_equal(trained.wta.w, init.wta.w)
