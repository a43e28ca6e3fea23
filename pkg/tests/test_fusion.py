from types import SimpleNamespace

import numpy as np
import pytest

from hypermie import fusion as fu
from hypermie import numerics as nm
from hypermie.errors import ValidationError


def sample_with(tokens, cls=0, e1=1, e2=None):
    return SimpleNamespace(
        sample_id="s0",
        token_matrix=np.asarray(tokens, dtype=np.float64),
        marker_cls=cls,
        marker_e1=e1,
        marker_e2=e2,
    )


class TestEntityRepresentation:
    def test_met_concatenation(self):
        s = sample_with([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
        assert np.array_equal(fu.entity_representation(s, fu.Task.MET), [1, 0, 0, 1])

    def test_mre_concatenation(self):
        s = sample_with([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], e2=2)
        assert np.array_equal(
            fu.entity_representation(s, fu.Task.MRE), [1, 0, 0, 1, 2, 2]
        )

    def test_mre_without_e2_rejected(self):
        s = sample_with([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValidationError):
            fu.entity_representation(s, fu.Task.MRE)

    def test_marker_out_of_range_rejected(self):
        s = sample_with([[1.0, 0.0], [0.0, 1.0]], e1=5)
        with pytest.raises(ValidationError):
            fu.entity_representation(s, fu.Task.MET)


class TestCrossModalAttention:
    def test_zero_weights_give_uniform(self):
        rng = np.random.default_rng(0)
        U = rng.normal(size=(5, 3))
        e = rng.normal(size=6)
        pooled, weights = fu.cross_modal_attention(U, e, np.zeros(9), 0.0)
        assert np.allclose(weights, 0.2)
        assert pooled == pytest.approx(U.mean(axis=0))

    def test_single_row(self):
        U = np.array([[1.0, 2.0]])
        pooled, weights = fu.cross_modal_attention(U, np.zeros(3), np.ones(5), 0.5)
        assert weights == pytest.approx([1.0])
        assert np.array_equal(pooled, U[0])

    def test_log_odds_scores(self):
        # rows scoring ln 3 and 0 split the mass 3:1
        U = np.array([[np.log(3.0)], [0.0]])
        w = np.array([1.0, 0.0])  # latent part selects the row value, entity part idle
        _, weights = fu.cross_modal_attention(U, np.zeros(1), w, 0.0)
        assert weights == pytest.approx([0.75, 0.25])

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            U = rng.normal(size=(7, 4)) * 3
            e = rng.normal(size=5)
            w = rng.normal(size=9)
            _, weights = fu.cross_modal_attention(U, e, w, rng.normal())
            assert weights.min() >= 0.0
            assert abs(weights.sum() - 1.0) < 1e-12

    def test_constant_shift_leaves_weights_unchanged(self):
        rng = np.random.default_rng(2)
        U = rng.normal(size=(4, 3))
        e = rng.normal(size=2)
        w = rng.normal(size=5)
        _, base = fu.cross_modal_attention(U, e, w, 0.0)
        shifted_w = w.copy()
        shifted_w[3:] += 7.5  # entity block shifts every score equally
        _, shifted = fu.cross_modal_attention(U, e, shifted_w, -3.0)
        assert np.array_equal(base, shifted)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            fu.cross_modal_attention(np.zeros((2, 3)), np.zeros(2), np.zeros(4), 0.0)


class TestSampleFeature:
    def test_concatenation(self):
        assert np.array_equal(
            fu.sample_feature(np.array([1.0]), np.array([2.0, 3.0])), [1, 2, 3]
        )

    def test_zero_inputs(self):
        out = fu.sample_feature(np.zeros(2), np.zeros(3))
        assert np.array_equal(out, np.zeros(5))

    def test_width_contract(self):
        out = fu.sample_feature(np.zeros(4), np.zeros(8))
        assert out.shape == (12,)


def identity_heads(width):
    return nm.Affine(np.eye(width), np.zeros(width))


class TestSimilarityScores:
    def test_identity_projection_dot_products(self):
        protos = fu.PrototypeSet(["a", "b"], np.array([[1.0, 0.0], [0.0, 1.0]]))
        scores = fu.similarity_scores(
            np.array([1.0, 0.0]), protos, identity_heads(2), identity_heads(2)
        )
        assert np.array_equal(scores, [1.0, 0.0])

    def test_zero_feature_zero_scores(self):
        protos = fu.PrototypeSet(["a", "b"], np.array([[1.0, 2.0], [3.0, 4.0]]))
        heads = identity_heads(2)
        scores = fu.similarity_scores(np.zeros(2), protos, heads, heads)
        assert np.array_equal(scores, np.zeros(2))

    def test_bilinearity_in_feature(self):
        rng = np.random.default_rng(3)
        protos = fu.PrototypeSet(["a", "b", "c"], rng.normal(size=(3, 4)))
        f = rng.normal(size=4)
        heads = nm.Affine(rng.normal(size=(2, 4)), np.zeros(2))
        one = fu.similarity_scores(f, protos, heads, heads)
        two = fu.similarity_scores(2 * f, protos, heads, heads)
        assert two == pytest.approx(2 * one)

    def test_argmax_invariant_under_prototype_bias_shift(self):
        # a shift of the prototype-projection bias moves every score in a row
        # by the same amount, so the winning category is unchanged
        rng = np.random.default_rng(4)
        protos = fu.PrototypeSet(list("abcd"), rng.normal(size=(4, 3)))
        feats = rng.normal(size=(6, 5))
        head_f = nm.Affine(rng.normal(size=(2, 5)), rng.normal(size=2))
        head_p = nm.Affine(rng.normal(size=(2, 3)), rng.normal(size=2))
        shifted = nm.Affine(head_p.w, head_p.b + 11.0)
        base = fu.similarity_scores(feats, protos, head_f, head_p)
        moved = fu.similarity_scores(feats, protos, head_f, shifted)
        assert np.array_equal(np.argmax(base, axis=1), np.argmax(moved, axis=1))

    def test_projection_width_mismatch_rejected(self):
        protos = fu.PrototypeSet(["a"], np.ones((1, 3)))
        with pytest.raises(ValidationError):
            fu.similarity_scores(
                np.zeros(2),
                protos,
                nm.Affine(np.eye(2), np.zeros(2)),
                nm.Affine(np.ones((3, 3)), np.zeros(3)),
            )


class TestRankingLoss:
    def test_well_separated_scores(self):
        assert fu.ranking_loss(np.array([2.0, 0.5, -1.0]), 0) == pytest.approx(1.0)

    def test_all_equal_scores(self):
        assert fu.ranking_loss(np.zeros(4), 2) == pytest.approx(4.0)

    def test_direct_evaluation(self):
        assert fu.ranking_loss(np.array([0.0, 5.0]), 0) == pytest.approx(7.0)

    def test_true_term_is_exactly_one(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            scores = rng.normal(size=6) * 10
            true = int(rng.integers(0, 6))
            well_separated = scores.copy()
            well_separated[true] = scores.max() + 2.0
            assert fu.ranking_loss(well_separated, true) == 1.0

    def test_lower_bound_one(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            scores = rng.normal(size=5) * 3
            assert fu.ranking_loss(scores, int(rng.integers(0, 5))) >= 1.0

    def test_strictly_above_one_when_margin_violated(self):
        # any competitor above o_true - 1 contributes a positive hinge term
        scores = np.array([2.0, 1.5, -3.0])
        assert fu.ranking_loss(scores, 0) > 1.0

    def test_extreme_scores_stay_finite(self):
        _, weights = fu.cross_modal_attention(
            np.array([[900.0], [-900.0]]), np.zeros(1), np.array([1.0, 0.0]), 0.0
        )
        assert np.isfinite(weights).all()
        assert weights[0] == pytest.approx(1.0)

    def test_exclude_true_variant(self):
        assert fu.ranking_loss(np.array([0.0, 5.0]), 0, exclude_true=True) == pytest.approx(6.0)
        assert fu.ranking_loss(np.array([3.0]), 0, exclude_true=True) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            fu.ranking_loss(np.zeros(0), 0)

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        params = nm.ParamStore()
        params.add("s", rng.normal(size=5))

        def loss(p):
            return fu.ranking_loss(p["s"], 2)

        _, grads = nm.evaluate_with_gradients(loss, params)
        fd = nm.finite_difference_gradient(loss, params)
        assert np.abs(grads["s"] - fd["s"]).max() < 1e-7


class TestPrototypeSet:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ValidationError):
            fu.PrototypeSet(["a", "a"], np.zeros((2, 2)))

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            fu.PrototypeSet(["a", "b"], np.zeros((3, 2)))

    def test_subset(self):
        ps = fu.PrototypeSet(["a", "b", "c"], np.arange(6.0).reshape(3, 2))
        sub = ps.subset([2, 0])
        assert sub.names == ["c", "a"]
        assert np.array_equal(sub.vectors, [[4.0, 5.0], [0.0, 1.0]])
