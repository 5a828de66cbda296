import math

import numpy as np
import pytest

from conftest import fd_grad, rel_err
from gaussood import head
from gaussood.head import GaussianDescriptorSet, OOD_LABEL


def random_instance(rng, n=8, k=3, d=5, sigma_scale=0.4):
    desc = GaussianDescriptorSet(
        mu=rng.normal(size=(k, d)), sigma_raw=rng.normal(scale=sigma_scale, size=k))
    z = rng.normal(size=(n, d))
    y = rng.integers(0, k, size=n)
    return desc, z, y


def scalar_distances(desc, z_row):
    """Loop-based oracle for D_i, no vector ops."""
    out = []
    for i in range(desc.k):
        sigma = math.exp(desc.sigma_raw[i])
        quad = 0.0
        for j in range(desc.d):
            quad += (z_row[j] - desc.mu[i, j]) ** 2
        out.append(quad / (2.0 * sigma**2) + desc.d * math.log(sigma))
    return out


def scalar_efl(logits, y, beta, gamma, n_y):
    """Hand-evaluated softmax + class-balanced focal loss for one sample."""
    m = max(logits)
    exps = [math.exp(v - m) for v in logits]
    p_y = exps[y] / sum(exps)
    p_y = min(max(p_y, 1e-12), 1.0)
    weight = (1.0 - beta) / (1.0 - beta**n_y)
    return -weight * (1.0 - p_y) ** gamma * math.log(p_y)


class TestDistancesAndScores:
    def test_at_center_unit_sigma_distance_zero(self):
        desc = GaussianDescriptorSet(mu=np.array([[1.0, 2.0, 3.0]]), sigma_raw=np.zeros(1))
        assert head.class_distances(desc, np.array([1.0, 2.0, 3.0]))[0] == 0.0

    def test_three_four_five_example(self):
        desc = GaussianDescriptorSet(mu=np.array([[3.0, 4.0]]), sigma_raw=np.zeros(1))
        d = head.class_distances(desc, np.zeros(2))
        assert d[0] == pytest.approx(12.5, abs=1e-12)
        z = head.class_scores(desc, np.zeros(2))
        assert z[0] == pytest.approx(-11.5, abs=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(21)
        desc, z, _ = random_instance(rng, n=4, k=3, d=5)
        got = head.class_distances(desc, z)
        for r in range(4):
            assert rel_err(got[r], np.array(scalar_distances(desc, z[r]))) < 1e-12

    def test_score_is_sigma_minus_distance_exactly(self):
        rng = np.random.default_rng(22)
        for _ in range(20):
            desc, z, _ = random_instance(rng)
            dist = head.class_distances(desc, z)
            zeta = head.class_scores(desc, z)
            assert np.array_equal(zeta, desc.sigma - dist)

    def test_inside_own_cluster_positive_others_negative(self):
        # sample sits on cluster 2's center; clusters 1 and 3 are far away
        mu = np.array([[10.0, 0.0], [0.0, 0.0], [0.0, 10.0]])
        desc = GaussianDescriptorSet(mu=mu, sigma_raw=np.zeros(3))
        zeta = head.class_scores(desc, np.zeros(2))
        assert zeta[1] > 0 and zeta[0] < 0 and zeta[2] < 0

    def test_dimension_mismatch_rejected(self):
        desc = GaussianDescriptorSet(mu=np.zeros((2, 3)), sigma_raw=np.zeros(2))
        with pytest.raises(ValueError):
            head.class_distances(desc, np.zeros(4))

    def test_distance_lower_bound(self):
        # quadratic part is nonnegative, so D_i >= d * log(sigma_i)
        rng = np.random.default_rng(23)
        for _ in range(20):
            desc, z, _ = random_instance(rng)
            dist = head.class_distances(desc, z)
            floor = desc.d * desc.sigma_raw
            assert np.all(dist >= floor[None, :] - 1e-12)


class TestPullLoss:
    def test_zero_at_own_center(self):
        desc = GaussianDescriptorSet(mu=np.array([[1.0, 1.0]]), sigma_raw=np.zeros(1))
        assert head.pull_loss(desc, np.array([[1.0, 1.0]]), [0]) == 0.0

    def test_single_sample_arithmetic(self):
        desc = GaussianDescriptorSet(mu=np.array([[3.0, 4.0]]), sigma_raw=np.zeros(1))
        assert head.pull_loss(desc, np.zeros((1, 2)), [0]) == pytest.approx(12.5)

    def test_equals_sum_of_own_class_distances(self):
        rng = np.random.default_rng(31)
        desc, z, y = random_instance(rng)
        expect = sum(head.class_distances(desc, z[r])[y[r]] for r in range(len(y)))
        assert head.pull_loss(desc, z, y) == pytest.approx(expect, rel=1e-12)

    def test_label_out_of_range_rejected(self):
        desc = GaussianDescriptorSet(mu=np.zeros((2, 2)), sigma_raw=np.zeros(2))
        with pytest.raises(ValueError):
            head.pull_loss(desc, np.zeros((1, 2)), [2])


class TestScoreLoss:
    def test_single_class_zero_score_gives_zero(self):
        # sigma = 1, ||z - mu||^2 = 2 puts D = 1 = sigma, so zeta_y = 0
        desc = GaussianDescriptorSet(mu=np.zeros((1, 2)), sigma_raw=np.zeros(1))
        z = np.array([[math.sqrt(2.0), 0.0]])
        assert head.score_loss(desc, z, [0]) == pytest.approx(0.0, abs=1e-12)

    def test_two_class_zero_scores(self):
        # both zeta values zero: loss = exp(0)/1 + 0 = 1
        mu = np.array([[0.0, 0.0], [2.0 * math.sqrt(2.0), 0.0]])
        desc = GaussianDescriptorSet(mu=mu, sigma_raw=np.zeros(2))
        z = np.array([[math.sqrt(2.0), 0.0]])
        assert head.score_loss(desc, z, [0]) == pytest.approx(1.0, abs=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(33)
        desc, z, y = random_instance(rng)
        n = len(y)
        expect = 0.0
        for r in range(n):
            zeta = [math.exp(desc.sigma_raw[i]) - d
                    for i, d in enumerate(scalar_distances(desc, z[r]))]
            for i in range(desc.k):
                if i != y[r]:
                    expect += math.exp(zeta[i]) / n
            own = zeta[y[r]]
            expect += max(-own, 0.0) + math.log(1.0 + own**2)
        assert head.score_loss(desc, z, y) == pytest.approx(expect, rel=1e-12)


class TestEffectiveFocalLoss:
    def test_gamma_zero_single_count_is_cross_entropy(self):
        logits = np.array([2.0, -1.0, 0.5])
        one_hot = np.array([0.0, 1.0, 0.0])
        got = head.effective_focal_loss(one_hot, logits, beta=0.9, gamma=0.0, n_y=1)
        m = logits.max()
        p = math.exp(logits[1] - m) / sum(math.exp(v - m) for v in logits)
        assert got == pytest.approx(-math.log(p), rel=1e-12)

    def test_certain_prediction_gives_zero(self):
        logits = np.array([200.0, -200.0])
        got = head.effective_focal_loss(np.array([1.0, 0.0]), logits, 0.99, 1.0, 3)
        assert got == 0.0

    def test_hand_evaluated_example(self):
        logits = [2.0, 1.0, 0.0]
        got = head.effective_focal_loss(
            np.array([1.0, 0.0, 0.0]), np.array(logits), beta=0.995, gamma=1.0, n_y=4)
        assert got == pytest.approx(scalar_efl(logits, 0, 0.995, 1.0, 4), rel=1e-12)

    def test_invalid_arguments_rejected(self):
        one_hot, logits = np.array([1.0, 0.0]), np.array([0.0, 0.0])
        with pytest.raises(ValueError):
            head.effective_focal_loss(one_hot, logits, beta=1.0, gamma=1.0, n_y=1)
        with pytest.raises(ValueError):
            head.effective_focal_loss(one_hot, logits, beta=0.9, gamma=-1.0, n_y=1)
        with pytest.raises(ValueError):
            head.effective_focal_loss(one_hot, logits, beta=0.9, gamma=1.0, n_y=0)
        with pytest.raises(ValueError):
            head.effective_focal_loss(np.array([1.0, 1.0]), logits, 0.9, 1.0, 1)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(41)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            logits = rng.normal(size=k) * 3
            one_hot = np.zeros(k)
            one_hot[rng.integers(0, k)] = 1.0
            c = rng.normal() * 10
            a = head.effective_focal_loss(one_hot, logits, 0.97, 1.0, 2)
            b = head.effective_focal_loss(one_hot, logits + c, 0.97, 1.0, 2)
            assert abs(a - b) < 1e-10


class TestEflBatchLosses:
    def test_equidistant_symmetry(self):
        # equal distances to all clusters: p uniform, closed form
        k, gamma, beta = 3, 1.0, 0.95
        mu = np.array([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]])
        desc = GaussianDescriptorSet(mu=mu, sigma_raw=np.zeros(k))
        z = np.zeros((1, 3))
        weight = (1 - beta) / (1 - beta**1)
        expect = -weight * (1 - 1 / k) ** gamma * math.log(1 / k)
        assert head.efl1(desc, z, [0], beta, gamma) == pytest.approx(expect, rel=1e-12)
        assert head.efl2(desc, z, [0], beta, gamma) == pytest.approx(expect, rel=1e-12)

    def test_own_cluster_dominant_gives_small_loss(self):
        mu = np.vstack([np.zeros(4), np.full(4, 50.0)])
        desc = GaussianDescriptorSet(mu=mu, sigma_raw=np.zeros(2))
        z = np.zeros((1, 4)) + 0.01
        assert head.efl1(desc, z, [0], 0.95, 1.0) < 1e-6
        assert head.efl2(desc, z, [0], 0.95, 1.0) < 1e-6

    def test_matches_compose_by_hand_oracle(self):
        rng = np.random.default_rng(43)
        desc, z, y = random_instance(rng)
        beta, gamma = 0.9, 1.0
        counts = np.bincount(y, minlength=desc.k)
        expect1 = expect2 = 0.0
        for r in range(len(y)):
            dist = scalar_distances(desc, z[r])
            logits1 = [1.0 / max(v, 1e-8) for v in dist]
            logits2 = [math.exp(desc.sigma_raw[i]) - dist[i] for i in range(desc.k)]
            expect1 += scalar_efl(logits1, y[r], beta, gamma, counts[y[r]])
            expect2 += scalar_efl(logits2, y[r], beta, gamma, counts[y[r]])
        assert head.efl1(desc, z, y, beta, gamma) == pytest.approx(expect1, rel=1e-12)
        assert head.efl2(desc, z, y, beta, gamma) == pytest.approx(expect2, rel=1e-12)


class TestNetLoss:
    def test_net_is_exact_sum(self):
        rng = np.random.default_rng(51)
        for _ in range(10):
            desc, z, y = random_instance(rng)
            b = head.net_loss(desc, z, y, 0.9, 1.0)
            assert b.net == b.pull + b.score_loss + b.efl1 + b.efl2

    def test_components_match_standalone_ops(self):
        rng = np.random.default_rng(52)
        desc, z, y = random_instance(rng)
        b = head.net_loss(desc, z, y, 0.9, 1.0)
        assert b.pull == head.pull_loss(desc, z, y)
        assert b.score_loss == head.score_loss(desc, z, y)
        assert b.efl1 == head.efl1(desc, z, y, 0.9, 1.0)
        assert b.efl2 == head.efl2(desc, z, y, 0.9, 1.0)

    def test_stationary_configuration(self):
        # every sample at its own center, sigma = 1, other clusters far
        mu = np.vstack([np.zeros(3), np.full(3, 40.0)])
        desc = GaussianDescriptorSet(mu=mu, sigma_raw=np.zeros(2))
        z = np.vstack([np.zeros(3), np.full(3, 40.0)])
        b = head.net_loss(desc, z, [0, 1], 0.9, 1.0)
        assert b.pull == 0.0
        assert b.efl1 < 1e-8 and b.efl2 < 1e-8

    def test_all_components_nonnegative_unit_sigma(self):
        rng = np.random.default_rng(53)
        for _ in range(50):
            desc, z, y = random_instance(rng, sigma_scale=0.0)  # sigma = 1
            b = head.net_loss(desc, z, y, 0.9, 1.0)
            assert b.pull >= 0.0
            assert b.score_loss >= 0.0
            assert b.efl1 >= 0.0
            assert b.efl2 >= 0.0

    def test_efl_terms_nonnegative_any_sigma(self):
        rng = np.random.default_rng(54)
        for _ in range(50):
            desc, z, y = random_instance(rng, sigma_scale=0.8)
            b = head.net_loss(desc, z, y, 0.9, 1.0)
            assert b.efl1 >= 0.0 and b.efl2 >= 0.0 and b.score_loss >= 0.0

    def test_excluded_terms_report_zero(self):
        rng = np.random.default_rng(55)
        desc, z, y = random_instance(rng)
        b = head.net_loss(desc, z, y, 0.9, 1.0, include=("pull", "efl2"))
        assert b.score_loss == 0.0 and b.efl1 == 0.0
        assert b.net == b.pull + b.efl2
        with pytest.raises(ValueError):
            head.net_loss(desc, z, y, 0.9, 1.0, include=("nope",))


class TestLossGradients:
    def test_pull_gradient_zero_at_center(self):
        desc = GaussianDescriptorSet(mu=np.array([[2.0, -1.0]]), sigma_raw=np.zeros(1))
        g = head.loss_gradients(desc, np.array([[2.0, -1.0]]), [0], 0.9, 1.0,
                                include=("pull",))
        assert np.allclose(g.embeddings, 0.0, atol=1e-14)

    def test_symmetric_mu_gradients_cancel(self):
        # two clusters mirrored through the origin with mirrored samples
        mu = np.array([[1.0, 0.0], [-1.0, 0.0]])
        desc = GaussianDescriptorSet(mu=mu, sigma_raw=np.zeros(2))
        z = np.array([[2.0, 0.5], [-2.0, -0.5]])
        g = head.loss_gradients(desc, z, [0, 1], 0.9, 1.0)
        assert np.allclose(g.mu[0], -g.mu[1], atol=1e-12)
        assert g.mu.sum() == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_differences_random(self):
        rng = np.random.default_rng(61)
        for trial in range(50):
            n = int(rng.integers(2, 17))
            k = int(rng.integers(2, 5))
            d = int(rng.integers(2, 9))
            desc, z, y = random_instance(rng, n=n, k=k, d=d)
            gamma = float(rng.choice([0.0, 1.0, 2.0]))
            beta = float(rng.uniform(0.8, 0.999))
            got = head.loss_gradients(desc, z, y, beta, gamma)

            def value():
                return head.net_loss(desc, z, y, beta, gamma).net

            assert rel_err(got.embeddings, fd_grad(value, z)) < 1e-4
            assert rel_err(got.mu, fd_grad(value, desc.mu)) < 1e-4
            assert rel_err(got.sigma_raw, fd_grad(value, desc.sigma_raw)) < 1e-4

    def test_respects_loss_mask(self):
        rng = np.random.default_rng(62)
        desc, z, y = random_instance(rng)
        got = head.loss_gradients(desc, z, y, 0.9, 1.0, include=("score",))

        def value():
            return head.net_loss(desc, z, y, 0.9, 1.0, include=("score",)).net

        assert rel_err(got.embeddings, fd_grad(value, z)) < 1e-4
        assert rel_err(got.sigma_raw, fd_grad(value, desc.sigma_raw)) < 1e-4


class TestPredict:
    def test_single_positive_score_picks_that_class(self):
        rng = np.random.default_rng(71)
        desc = GaussianDescriptorSet(mu=rng.normal(size=(3, 2)), sigma_raw=np.zeros(3))
        # scores (-2, 0.5, -1) -> class index 1
        pred = self._predict_from_scores(np.array([-2.0, 0.5, -1.0]))
        assert pred.label == 1 and pred.confidence == 0.5

    def test_all_negative_is_ood(self):
        pred = self._predict_from_scores(np.array([-2.0, -0.5, -1.0]))
        assert pred.label == OOD_LABEL and pred.confidence == -0.5

    def test_zero_boundary_and_tie(self):
        pred = self._predict_from_scores(np.array([0.0, 0.0]))
        assert pred.label == 0 and pred.confidence == 0.0

    @staticmethod
    def _predict_from_scores(scores):
        """Build a descriptor set realizing the given scores exactly at z=0.

        With sigma_i = 1 and d = 3: zeta_i = 1 - q_i/2, so each target
        needs a center with integer coordinates of squared norm
        q_i = 2 (1 - zeta_i); integer sums of squares keep the float
        arithmetic exact.
        """
        mu_rows = []
        for zeta in scores:
            q = 2.0 * (1.0 - zeta)
            assert q == int(q) and q >= 0
            target = int(q)
            found = next(
                (a, b, c)
                for a in range(10) for b in range(10) for c in range(10)
                if a * a + b * b + c * c == target
            )
            mu_rows.append(found)
        desc = GaussianDescriptorSet(mu=np.array(mu_rows, dtype=float),
                                     sigma_raw=np.zeros(len(mu_rows)))
        assert np.array_equal(head.class_scores(desc, np.zeros(3)), scores)
        return head.predict(desc, np.zeros(3))

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(72)
        desc, z, _ = random_instance(rng, n=50)
        labels, conf = head.predict_batch(desc, z)
        for r in range(50):
            single = head.predict(desc, z[r])
            assert single.label == labels[r]
            assert single.confidence == conf[r]

    def test_ood_iff_max_negative_random(self):
        rng = np.random.default_rng(73)
        desc, z, _ = random_instance(rng, n=200)
        labels, conf = head.predict_batch(desc, z)
        zeta = head.class_scores(desc, z)
        for r in range(200):
            assert (labels[r] == OOD_LABEL) == (zeta[r].max() < 0)


class TestTranslationEquivariance:
    def test_distances_scores_losses_predictions_invariant(self):
        rng = np.random.default_rng(81)
        for _ in range(30):
            desc, z, y = random_instance(rng)
            c = rng.normal(size=desc.d) * 5
            shifted = GaussianDescriptorSet(mu=desc.mu + c, sigma_raw=desc.sigma_raw.copy())
            assert rel_err(head.class_distances(desc, z),
                           head.class_distances(shifted, z + c)) < 1e-10
            assert rel_err(head.class_scores(desc, z),
                           head.class_scores(shifted, z + c)) < 1e-10
            a = head.net_loss(desc, z, y, 0.9, 1.0)
            b = head.net_loss(shifted, z + c, y, 0.9, 1.0)
            assert abs(a.net - b.net) <= 1e-10 * max(1.0, abs(a.net))
            la, _ = head.predict_batch(desc, z)
            lb, _ = head.predict_batch(shifted, z + c)
            assert np.array_equal(la, lb)
