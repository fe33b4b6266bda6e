import itertools

import numpy as np
import pytest

from dife import isw as W
from dife import tensor as T
from dife.tensor import Tape, Tensor, ContractError


class TestFeatureCovariance:
    def test_zeros(self):
        theta = W.feature_covariance(T.zeros((1, 3, 2, 2)))
        assert np.all(theta.data == 0.0)

    def test_outer_product_single_pixel(self):
        # raw Gram form: column (1,2)^T over a single spatial position
        f = Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1))
        theta = W.feature_covariance(f, center=False)
        assert np.allclose(theta.data[0, 0], [[1.0, 2.0], [2.0, 4.0]])

    def test_orthogonal_rows(self):
        f = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 1, 2))
        theta = W.feature_covariance(f, center=False).data[0, 0]
        assert np.allclose(theta, np.eye(2) / 2.0)  # divisor h*w = 2

    def test_symmetric_psd(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            c = int(rng.integers(2, 9))
            f = Tensor(rng.normal(size=(2, c, 4, 4)))
            theta = W.feature_covariance(f).data
            for sample in theta[:, 0]:
                assert np.abs(sample - sample.T).max() < 1e-9
                assert np.linalg.eigvalsh(sample).min() >= -1e-8

    def test_centering_removes_spatial_mean(self):
        rng = np.random.default_rng(6)
        f = rng.normal(size=(1, 3, 4, 4))
        shifted = f + rng.uniform(-5, 5, (1, 3, 1, 1))
        a = W.feature_covariance(Tensor(f)).data
        b = W.feature_covariance(Tensor(shifted)).data
        assert np.abs(a - b).max() < 1e-9


class TestCovarianceVariance:
    def test_identical_pair_zero(self):
        theta = np.random.default_rng(0).normal(size=(3, 3))
        v, mu = W.covariance_variance(theta, theta)
        assert np.all(v == 0.0)
        assert np.allclose(mu, theta)

    def test_single_entry_arithmetic(self):
        v, mu = W.covariance_variance(np.array([[1.0]]), np.array([[3.0]]))
        assert mu[0, 0] == pytest.approx(2.0)
        assert v[0, 0] == pytest.approx(1.0)

    def test_quadratic_scaling(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 4, 4))
        v1, _ = W.covariance_variance(a, b)
        v2, _ = W.covariance_variance(3.0 * a, 3.0 * b)
        assert np.allclose(v2, 9.0 * v1)

    def test_batch_average(self):
        a = np.zeros((2, 1, 1))
        b = np.zeros((2, 1, 1))
        a[0], b[0] = 1.0, 3.0   # v = 1
        a[1], b[1] = 0.0, 0.0   # v = 0
        v, _ = W.covariance_variance(a, b)
        assert v[0, 0] == pytest.approx(0.5)


def brute_force_kmeans(values, k):
    """Exhaustive optimum over contiguous partitions of the sorted values."""
    vals = np.sort(np.asarray(values, dtype=np.float64))
    n = vals.size
    best_sse, best_bounds = np.inf, None
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = [0, *cuts, n]
        sse = sum(
            ((vals[bounds[i]:bounds[i + 1]] - vals[bounds[i]:bounds[i + 1]].mean()) ** 2).sum()
            for i in range(k)
        )
        if sse < best_sse - 1e-12:
            best_sse, best_bounds = sse, bounds
    return best_sse, best_bounds


def cluster_sse(values, labels, k):
    vals = np.asarray(values, dtype=np.float64)
    return sum(
        ((vals[labels == j] - vals[labels == j].mean()) ** 2).sum()
        for j in range(k) if (labels == j).any()
    )


class TestKmeans1d:
    def test_two_obvious_groups(self):
        labels, centroids = W.kmeans_1d([0.1, 0.2, 5.0, 5.1], 2)
        assert labels.tolist() == [0, 0, 1, 1]
        assert centroids[0] == pytest.approx(0.15)
        assert centroids[1] == pytest.approx(5.05)

    def test_all_equal_degenerate(self):
        with pytest.raises(W.DegenerateClusterError):
            W.kmeans_1d([2.0, 2.0, 2.0], 2)

    def test_two_points_two_clusters(self):
        labels, centroids = W.kmeans_1d([10.0, 0.0], 2)
        assert centroids.tolist() == [0.0, 10.0]
        assert labels.tolist() == [1, 0]

    def test_matches_exhaustive_optimum(self):
        rng = np.random.default_rng(12)
        for trial in range(300):
            n = int(rng.integers(3, 13))
            k = int(rng.integers(2, min(n, 5) + 1))
            values = np.round(rng.uniform(0, 10, n), 3)
            if np.unique(values).size < k:
                continue
            labels, _ = W.kmeans_1d(values, k)
            sse = cluster_sse(values, labels, k)
            best, _ = brute_force_kmeans(values, k)
            assert sse == pytest.approx(best, abs=1e-9), (values.tolist(), k)


class TestBuildMask:
    def _v(self, entries, c=3):
        v = np.zeros((c, c))
        iu = np.triu_indices(c, 1)
        v[iu] = entries
        return v + v.T

    def test_single_outlier(self):
        v = self._v([0.01, 0.02, 9.0])
        mask = W.build_mask(v, 2)
        expected = np.zeros((3, 3), dtype=bool)
        # 9.0 went to position (1, 2) in the upper triangle ordering
        iu = np.triu_indices(3, 1)
        pos = list(zip(*iu))[2]
        expected[pos] = expected[pos[::-1]] = True
        assert np.array_equal(mask, expected)

    def test_zero_matrix_empty_mask(self):
        with pytest.warns(UserWarning):
            mask = W.build_mask(np.zeros((4, 4)), 2)
        assert not mask.any()

    def test_k3_masks_all_but_lowest(self):
        v = self._v([0.01, 1.0, 9.0])
        mask = W.build_mask(v, 3)
        iu = np.triu_indices(3, 1)
        vals = v[iu]
        masked_vals = sorted(v[mask].tolist())
        assert mask.sum() == 4  # two entries mirrored
        assert set(np.round(masked_vals, 6)) == {1.0, 9.0}

    def test_mask_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(0, 1, (6, 6))
        v = (v + v.T) / 2
        mask = W.build_mask(v, 2)
        assert np.array_equal(mask, mask.T)
        assert not mask.diagonal().any()


class TestIswLoss:
    def test_single_entry_mean(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 1] = True
        theta = np.zeros((1, 1, 3, 3))
        theta[0, 0, 0, 1] = 3.0
        loss = W.isw_loss(Tensor(theta), Tensor(theta.copy()), mask)
        assert loss.item() == pytest.approx(3.0)

    def test_empty_mask_returns_zero(self):
        theta = Tensor(np.random.default_rng(0).normal(size=(2, 1, 3, 3)))
        loss = W.isw_loss(theta, theta, np.zeros((3, 3), dtype=bool))
        assert loss.item() == 0.0

    def test_per_view_mean_then_view_average(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 1] = mask[1, 2] = True
        t1 = np.zeros((1, 1, 3, 3))
        t1[0, 0, 0, 1], t1[0, 0, 1, 2] = 1.0, 3.0
        t2 = np.zeros((1, 1, 3, 3))
        t2[0, 0, 0, 1], t2[0, 0, 1, 2] = 1.0, 1.0
        loss = W.isw_loss(Tensor(t1), Tensor(t2), mask)
        assert loss.item() == pytest.approx(1.5)

    def test_gradient_only_through_masked_entries(self):
        rng = np.random.default_rng(5)
        c = 4
        mask = np.zeros((c, c), dtype=bool)
        mask[0, 1] = mask[1, 0] = True
        f = Tensor(rng.normal(size=(1, c, 3, 3)), requires_grad=True)
        g = Tensor(rng.normal(size=(1, c, 3, 3)))
        with Tape() as tape:
            loss = W.isw_loss(W.feature_covariance(f), W.feature_covariance(g), mask)
            tape.backward(loss)
            grad = tape.grad(f)
        # perturbation directions keeping channels 0 and 1 fixed leave the loss flat
        assert np.abs(grad[0, 2:]).max() < 1e-12
        assert np.abs(grad[0, :2]).max() > 0.0

    def test_descent_suppresses_masked_entries(self):
        rng = np.random.default_rng(9)
        c = 4
        feats = Tensor(rng.normal(size=(1, c, 4, 4)), requires_grad=True)
        mask = W.build_mask(np.abs(W.feature_covariance(feats).data[0, 0]) *
                            (1 - np.eye(c)), 2)
        assert mask.any()
        history = []
        for _ in range(200):
            with Tape() as tape:
                theta = W.feature_covariance(feats)
                loss = W.isw_loss(theta, theta, mask)
                tape.backward(loss)
                grad = tape.grad(feats)
            history.append(loss.item())
            feats.data = feats.data - 0.005 * grad
        tail = history[10:]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
        assert history[-1] < history[10]


class TestDwtLoss:
    def _theta(self, mat):
        return Tensor(np.asarray(mat)[None, None])

    def test_identity_gives_zero(self):
        assert W.dwt_loss(self._theta(np.eye(3))).item() == 0.0

    def test_two_eye(self):
        assert W.dwt_loss(self._theta(2.0 * np.eye(2))).item() == pytest.approx(0.5)

    def test_zero_matrix(self):
        assert W.dwt_loss(self._theta(np.zeros((2, 2)))).item() == pytest.approx(0.5)

    def test_zero_iff_identity(self):
        rng = np.random.default_rng(2)
        theta = np.eye(4) + rng.uniform(-0.1, 0.1, (4, 4))
        assert W.dwt_loss(self._theta(theta)).item() > 1e-12


class TestWarmup:
    def test_constant_stream(self):
        stats = W.CovarianceStats(3, 2)
        tx = np.random.default_rng(0).normal(size=(2, 3, 3))
        ttx = tx + 1.0
        for _ in range(4):
            W.update_warmup(stats, tx.reshape(2, 1, 3, 3), ttx.reshape(2, 1, 3, 3))
        v_single, _ = W.covariance_variance(tx, ttx)
        assert np.allclose(stats.v, v_single)

    def test_running_mean_of_two_batches(self):
        stats = W.CovarianceStats(2, 2)
        a1, b1 = np.array([[[1.0, 0], [0, 1]]]), np.array([[[3.0, 0], [0, 1]]])
        a2, b2 = np.array([[[0.0, 2], [2, 0]]]), np.array([[[0.0, 0], [0, 0]]])
        W.update_warmup(stats, a1, b1)
        W.update_warmup(stats, a2, b2)
        v1, _ = W.covariance_variance(a1, b1)
        v2, _ = W.covariance_variance(a2, b2)
        assert np.allclose(stats.v, (v1 + v2) / 2.0)

    def test_freeze_matches_offline_mask(self):
        rng = np.random.default_rng(21)
        stats = W.CovarianceStats(4, 2)
        logged = []
        for _ in range(6):
            a = rng.normal(size=(2, 4, 4))
            b = a + rng.normal(0, rng.uniform(0.1, 2.0), (2, 4, 4))
            a = (a + a.swapaxes(1, 2)) / 2
            b = (b + b.swapaxes(1, 2)) / 2
            W.update_warmup(stats, a, b)
            logged.append(W.covariance_variance(a, b)[0])
        mask = stats.freeze()
        offline = W.build_mask(np.mean(logged, axis=0), 2)
        assert np.array_equal(mask, offline)

    def test_update_after_freeze_rejected(self):
        stats = W.CovarianceStats(2, 2)
        W.update_warmup(stats, np.array([[[1.0, 0], [0, 1]]]), np.array([[[2.0, 1], [1, 0]]]))
        stats.freeze()
        with pytest.raises(ContractError):
            W.update_warmup(stats, np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))


def test_isw_gradients_match_finite_differences():
    from dife import gradcheck as G

    results = G.suite_isw(seeds=range(5))
    bad = {k: v for k, v in results.items() if v >= G.OP_TOL}
    assert not bad, f"isw gradients over tolerance: {bad}"
