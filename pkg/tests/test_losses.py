"""Loss functions: hand values, oracles, kink-aware gradients, mining."""

import numpy as np
import pytest

from partreid.errors import ConfigurationError, UsageError
from partreid.losses import (
    LayerwiseSpec,
    TripletSpec,
    combine_losses,
    cross_entropy,
    euclidean_distance,
    layerwise_similarity_loss,
    mine_batch_hard,
    pairwise_distances,
    project_tap,
    total_loss,
    triplet_loss,
)
from partreid.streams import FeatureMap, LayerTap
from partreid.tensor import Tape, Tensor, backward


def triplet_oracle(a, p, n, margin):
    """Plain-numpy reference for the hinge triplet loss."""
    d_ap = np.sqrt(((a - p) ** 2).sum())
    d_an = np.sqrt(((a - n) ** 2).sum())
    return max(d_ap - d_an + margin, 0.0)


def cross_entropy_oracle(logits, label):
    z = np.asarray(logits, dtype=np.float64)
    return float(np.log(np.exp(z).sum()) - z[label])


def make_tap(layer, values, requires_grad=False):
    arr = np.asarray(values, dtype=np.float64).reshape(1, 1, -1)
    t = Tensor(arr, requires_grad=requires_grad)
    return LayerTap(layer, FeatureMap(t, "appearance"))


def identity_tap_params(layer, dim=1):
    w = np.eye(dim)
    return {
        f"tap.{layer}.weight": Tensor(w),
        f"tap.{layer}.bias": Tensor(np.zeros(dim)),
    }


SPEC = TripletSpec(margin=0.3)


class TestTripletLoss:
    def test_identical_triple_gives_margin(self):
        f = Tensor(np.array([1.0, 2.0, 3.0]))
        loss = triplet_loss(f, f, f, SPEC)
        np.testing.assert_allclose(loss.array, 0.3, atol=1e-15)

    def test_well_separated_negative_gives_zero(self):
        fa = Tensor(np.array([0.0, 0.0]))
        fp = Tensor(np.array([0.0, 0.0]))
        fn = Tensor(np.array([10.0, 0.0]))
        loss = triplet_loss(fa, fp, fn, SPEC)
        np.testing.assert_allclose(loss.array, 0.0, atol=1e-15)

    def test_hand_value(self):
        # d_ap = 5, d_an = 0 -> 5 + 0.3
        fa = Tensor(np.array([0.0]))
        fp = Tensor(np.array([5.0]))
        fn = Tensor(np.array([0.0]))
        loss = triplet_loss(fa, fp, fn, SPEC)
        np.testing.assert_allclose(loss.array, 5.3, atol=1e-12)

    def test_equal_positive_negative_distance_gives_margin(self):
        fa = Tensor(np.array([0.0, 0.0]))
        fp = Tensor(np.array([3.0, 0.0]))
        fn = Tensor(np.array([0.0, 3.0]))
        loss = triplet_loss(fa, fp, fn, SPEC)
        np.testing.assert_allclose(loss.array, 0.3, atol=1e-12)

    def test_matches_oracle_on_random_triples(self):
        rng = np.random.default_rng(41)
        for _ in range(50):
            a = rng.normal(size=6)
            p = rng.normal(size=6)
            n = rng.normal(size=6)
            m = float(rng.uniform(0.0, 1.0))
            got = triplet_loss(Tensor(a), Tensor(p), Tensor(n), TripletSpec(m))
            np.testing.assert_allclose(got.array, triplet_oracle(a, p, n, m),
                                       rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(UsageError):
            triplet_loss(Tensor(np.zeros(3)), Tensor(np.zeros(3)),
                         Tensor(np.zeros(4)), SPEC)

    def test_negative_margin_rejected(self):
        with pytest.raises(ConfigurationError):
            triplet_loss(Tensor(np.zeros(2)), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), TripletSpec(-0.1))

    def test_inactive_hinge_has_zero_gradient(self):
        fa = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        fp = Tensor(np.array([0.1, 0.0]), requires_grad=True)
        fn = Tensor(np.array([9.0, 0.0]), requires_grad=True)
        with Tape() as tape:
            loss = triplet_loss(fa, fp, fn, SPEC)
        grads = backward(loss, tape)
        for t in (fa, fp, fn):
            np.testing.assert_array_equal(grads[t], np.zeros(2))

    def test_gradient_matches_finite_differences(self):
        # active hinge, all distances well away from zero
        rng = np.random.default_rng(43)
        fa_v = rng.normal(size=5)
        fp_v = fa_v + rng.normal(size=5) * 0.3 + 1.0
        fn_v = fa_v + rng.normal(size=5) * 0.3 - 2.0
        base = triplet_oracle(fa_v, fp_v, fn_v, 2.5)
        assert base > 0.1  # construction keeps the hinge active
        spec = TripletSpec(2.5)
        fa = Tensor(fa_v, requires_grad=True)
        fp = Tensor(fp_v, requires_grad=True)
        fn = Tensor(fn_v, requires_grad=True)
        with Tape() as tape:
            loss = triplet_loss(fa, fp, fn, spec)
        grads = backward(loss, tape)
        eps = 1e-6
        for t, v in ((fa, fa_v), (fp, fp_v), (fn, fn_v)):
            for i in range(5):
                bumped = v.copy()
                bumped[i] += eps
                args = {fa: fa_v, fp: fp_v, fn: fn_v}
                args[t] = bumped
                up = triplet_oracle(args[fa], args[fp], args[fn], 2.5)
                bumped[i] -= 2 * eps
                down = triplet_oracle(args[fa], args[fp], args[fn], 2.5)
                fd = (up - down) / (2 * eps)
                np.testing.assert_allclose(grads[t][i], fd, rtol=1e-4, atol=1e-8)


class TestEuclideanDistance:
    def test_hand_value(self):
        d = euclidean_distance(Tensor(np.array([1.0, 1.0])),
                               Tensor(np.array([4.0, 5.0])))
        np.testing.assert_allclose(d.array, 5.0, atol=1e-15)

    def test_mismatch_rejected(self):
        with pytest.raises(UsageError):
            euclidean_distance(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros(4)), 2)
        np.testing.assert_allclose(loss.array, np.log(4.0), rtol=1e-12)

    def test_confident_correct_logits(self):
        loss = cross_entropy(Tensor(np.array([10.0, 0.0, 0.0])), 0)
        np.testing.assert_allclose(loss.array, np.log(1.0 + 2.0 * np.exp(-10.0)),
                                   rtol=1e-12)
        assert loss.array < 1e-4

    def test_shift_invariance(self):
        rng = np.random.default_rng(47)
        z = rng.normal(size=7)
        a = cross_entropy(Tensor(z), 3).array
        b = cross_entropy(Tensor(z + 1234.5), 3).array
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_large_logits_stay_finite(self):
        loss = cross_entropy(Tensor(np.array([1e4, 0.0])), 1)
        assert np.isfinite(loss.array)
        np.testing.assert_allclose(loss.array, 1e4, rtol=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(53)
        for _ in range(30):
            z = rng.normal(size=5) * 3
            lbl = int(rng.integers(5))
            got = cross_entropy(Tensor(z), lbl).array
            np.testing.assert_allclose(got, cross_entropy_oracle(z, lbl),
                                       rtol=1e-12)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(UsageError):
            cross_entropy(Tensor(np.zeros(3)), 3)
        with pytest.raises(UsageError):
            cross_entropy(Tensor(np.zeros(3)), -1)

    def test_non_vector_rejected(self):
        with pytest.raises(UsageError):
            cross_entropy(Tensor(np.zeros((2, 2))), 0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(59)
        z = rng.normal(size=6)
        logits = Tensor(z, requires_grad=True)
        with Tape() as tape:
            loss = cross_entropy(logits, 4)
        grads = backward(loss, tape)
        eps = 1e-6
        for i in range(6):
            zp = z.copy()
            zp[i] += eps
            zm = z.copy()
            zm[i] -= eps
            fd = (cross_entropy_oracle(zp, 4) - cross_entropy_oracle(zm, 4)) / (2 * eps)
            np.testing.assert_allclose(grads[logits][i], fd, rtol=1e-5, atol=1e-9)


class TestProjectTap:
    def test_single_cell_identity_projection_normalizes(self):
        tap = make_tap(0, [5.0])
        out = project_tap(tap, identity_tap_params(0), 0)
        np.testing.assert_allclose(out.array, [1.0], atol=1e-12)

    def test_missing_params_rejected(self):
        with pytest.raises(UsageError):
            project_tap(make_tap(0, [1.0]), {}, 0)


class TestLayerwiseLoss:
    def test_identical_taps_give_margin_each(self):
        spec = LayerwiseSpec(tap_layers=(0, 1), proj_dims=(1, 1),
                             weights=(0.5, 0.5))
        params = {**identity_tap_params(0), **identity_tap_params(1)}
        taps = [make_tap(0, [2.0]), make_tap(1, [3.0])]
        terms = layerwise_similarity_loss(taps, taps, taps, spec, SPEC, params)
        assert len(terms) == 2
        for t in terms:
            np.testing.assert_allclose(t.array, 0.3, atol=1e-12)

    def test_single_cell_triple_hand_value(self):
        # scalar taps 5, 5, 1 all normalize to [1.0]; the hinge sits at margin
        spec = LayerwiseSpec(tap_layers=(0,), proj_dims=(1,), weights=(0.5,))
        terms = layerwise_similarity_loss(
            [make_tap(0, [5.0])], [make_tap(0, [5.0])], [make_tap(0, [1.0])],
            spec, SPEC, identity_tap_params(0))
        np.testing.assert_allclose(terms[0].array, 0.3, atol=1e-12)

    def test_mismatched_tap_sets_rejected(self):
        spec = LayerwiseSpec(tap_layers=(0,), proj_dims=(1,), weights=(1.0,))
        with pytest.raises(UsageError):
            layerwise_similarity_loss(
                [make_tap(0, [1.0])], [make_tap(1, [1.0])], [make_tap(0, [1.0])],
                spec, SPEC, identity_tap_params(0))

    def test_missing_tap_layer_rejected(self):
        spec = LayerwiseSpec(tap_layers=(2,), proj_dims=(1,), weights=(1.0,))
        with pytest.raises(UsageError):
            layerwise_similarity_loss(
                [make_tap(0, [1.0])], [make_tap(0, [1.0])], [make_tap(0, [1.0])],
                spec, SPEC, identity_tap_params(0))

    def test_spec_length_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            LayerwiseSpec(tap_layers=(0, 1), proj_dims=(1,), weights=(1.0,)).validate()


class TestCombineLosses:
    def test_total_is_exact_fold_of_parts(self):
        t = Tensor([0.7])
        i = Tensor([1.3])
        l1 = Tensor([0.2])
        l2 = Tensor([0.4])
        total = combine_losses(t, i, [l1, l2], 0.25, (0.5, 0.5))
        expect = ((0.7 + 0.25 * 1.3) + 0.5 * 0.2) + 0.5 * 0.4
        assert total.item() == expect  # bit-exact fold

    def test_weight_count_mismatch_rejected(self):
        with pytest.raises(UsageError):
            combine_losses(Tensor(0.0), Tensor(0.0), [Tensor(0.0)], 0.0, ())


class TestTotalLoss:
    def test_no_taps_no_identity_equals_triplet(self):
        rng = np.random.default_rng(61)
        a, p, n = (Tensor(rng.normal(size=4)) for _ in range(3))
        report = total_loss(a, p, n, None, None, [], [], [],
                            SPEC, LayerwiseSpec(), 0.0, {})
        assert report.total.item() == report.triplet_final.item()
        assert report.identity.item() == 0.0
        assert report.layerwise == []

    def test_all_identical_two_taps_full_weight_gives_three_margins(self):
        f = Tensor(np.array([1.0, 2.0]))
        spec = LayerwiseSpec(tap_layers=(0, 1), proj_dims=(1, 1),
                             weights=(1.0, 1.0))
        params = {**identity_tap_params(0), **identity_tap_params(1)}
        taps = [make_tap(0, [2.0]), make_tap(1, [4.0])]
        report = total_loss(f, f, f, None, None, taps, taps, taps,
                            SPEC, spec, 0.0, params)
        np.testing.assert_allclose(report.total.array, 3 * 0.3, atol=1e-12)

    def test_identity_term_requires_logits(self):
        f = Tensor(np.zeros(2))
        with pytest.raises(UsageError):
            total_loss(f, f, f, None, None, [], [], [],
                       SPEC, LayerwiseSpec(), 0.5, {})

    def test_negative_lambda_rejected(self):
        f = Tensor(np.zeros(2))
        with pytest.raises(ConfigurationError):
            total_loss(f, f, f, None, None, [], [], [],
                       SPEC, LayerwiseSpec(), -0.1, {})

    def test_identity_weight_scales_cross_entropy(self):
        f = Tensor(np.array([0.0, 1.0]))
        logits = Tensor(np.zeros(4))
        report = total_loss(f, f, f, logits, 1, [], [], [],
                            SPEC, LayerwiseSpec(), 0.5, {})
        np.testing.assert_allclose(report.identity.array, np.log(4.0), rtol=1e-12)
        np.testing.assert_allclose(report.total.array, 0.3 + 0.5 * np.log(4.0),
                                   rtol=1e-12)

    def test_total_nonnegative_on_random_instances(self):
        rng = np.random.default_rng(67)
        for _ in range(20):
            a, p, n = (Tensor(rng.normal(size=3)) for _ in range(3))
            logits = Tensor(rng.normal(size=5))
            report = total_loss(a, p, n, logits, int(rng.integers(5)),
                                [], [], [], SPEC, LayerwiseSpec(),
                                float(rng.uniform(0, 1)), {})
            assert report.total.item() >= 0.0

    def test_report_parts_recombine_bit_exactly(self):
        f = Tensor(np.array([0.5, -0.5]))
        g = Tensor(np.array([0.25, 0.75]))
        h = Tensor(np.array([-1.0, 0.3]))
        logits = Tensor(np.array([0.2, 1.7, -0.4]))
        spec = LayerwiseSpec(tap_layers=(0,), proj_dims=(1,), weights=(0.5,))
        taps_a = [make_tap(0, [1.5])]
        taps_p = [make_tap(0, [2.5])]
        taps_n = [make_tap(0, [0.5])]
        report = total_loss(f, g, h, logits, 2, taps_a, taps_p, taps_n,
                            SPEC, spec, 0.7, identity_tap_params(0))
        refold = combine_losses(report.triplet_final, report.identity,
                                report.layerwise, 0.7, (0.5,))
        assert report.total.item() == refold.item()


class TestPairwiseDistances:
    def test_matches_naive_loops(self):
        rng = np.random.default_rng(71)
        x = rng.normal(size=(6, 4))
        got = pairwise_distances(x)
        for i in range(6):
            for j in range(6):
                ref = np.sqrt(((x[i] - x[j]) ** 2).sum())
                np.testing.assert_allclose(got[i, j], ref, atol=1e-12)

    def test_zero_diagonal_and_symmetry(self):
        rng = np.random.default_rng(73)
        x = rng.normal(size=(5, 3))
        d = pairwise_distances(x)
        np.testing.assert_array_equal(np.diag(d), np.zeros(5))
        np.testing.assert_allclose(d, d.T, atol=1e-15)


class TestMineBatchHard:
    def test_hand_case_picks_extremes(self):
        # line positions: ids a at 0 and 4, ids b at 1 and 9
        x = np.array([[0.0], [4.0], [1.0], [9.0]])
        labels = ["a", "a", "b", "b"]
        triples = mine_batch_hard(x, labels)
        # anchor 0: hardest pos = 1 (d=4), hardest neg = 2 (d=1)
        assert (0, 1, 2) in triples
        # anchor 3: hardest pos = 2 (d=8), hardest neg = 1 (d=5)
        assert (3, 2, 1) in triples
        assert len(triples) == 4

    def test_anchor_without_positive_skipped(self):
        x = np.array([[0.0], [1.0], [2.0]])
        triples = mine_batch_hard(x, ["solo", "pair", "pair"])
        anchors = [t[0] for t in triples]
        assert 0 not in anchors
        assert sorted(anchors) == [1, 2]

    def test_single_identity_rejected(self):
        with pytest.raises(UsageError):
            mine_batch_hard(np.zeros((3, 2)), ["x", "x", "x"])

    def test_length_mismatch_rejected(self):
        with pytest.raises(UsageError):
            mine_batch_hard(np.zeros((3, 2)), ["a", "b"])

    def test_ties_resolve_to_lowest_index(self):
        # positives at distance 1 on both sides; argmax must take index 1
        x = np.array([[0.0], [1.0], [-1.0], [5.0]])
        labels = ["a", "a", "a", "b"]
        triples = mine_batch_hard(x, labels)
        anchor0 = [t for t in triples if t[0] == 0][0]
        assert anchor0 == (0, 1, 3)

    def test_every_triple_is_valid(self):
        rng = np.random.default_rng(79)
        x = rng.normal(size=(16, 8))
        labels = [int(i) // 4 for i in range(16)]
        for a, p, n in mine_batch_hard(x, labels):
            assert labels[a] == labels[p] and a != p
            assert labels[a] != labels[n]

    def test_deterministic(self):
        rng = np.random.default_rng(83)
        x = rng.normal(size=(12, 5))
        labels = [i % 3 for i in range(12)]
        assert mine_batch_hard(x, labels) == mine_batch_hard(x, labels)
