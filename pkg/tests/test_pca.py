import numpy as np
import pytest

from conal.errors import ConfigError, DataError, UsageError
from conal.pca import (class_covariance_eig, fit_class_pca, fre_score,
                       fre_scores, load_class_pca, save_class_pca)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


class TestFit:
    def test_three_points_on_a_line(self):
        # covariance of x-coords {0,1,2}: mean 1, sum sq dev 2, /(n-1) = 1
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        model = fit_class_pca({0: pts}, n_components=1)
        sub = model.classes[0]
        np.testing.assert_allclose(sub.mean, [1.0, 0.0])
        assert abs(abs(sub.basis[0, 0]) - 1.0) < 1e-12 and abs(sub.basis[1, 0]) < 1e-12
        np.testing.assert_allclose(sub.eigenvalues, [1.0])

    def test_planar_data_reconstructs_exactly(self, rng):
        # points on a 2-D plane embedded in 5-D
        basis = np.linalg.qr(rng.standard_normal((5, 2)))[0]
        coords = rng.standard_normal((40, 2))
        pts = coords @ basis.T + rng.standard_normal(5)
        model = fit_class_pca({0: pts}, n_components=2)
        assert fre_scores(model, pts, 0).max() < 1e-8

    def test_variance_fraction_target(self, rng):
        pts = rng.standard_normal((300, 6))
        model = fit_class_pca({0: pts}, variance_fraction=0.95)
        sub = model.classes[0]
        total = np.trace(np.cov(pts.T))
        assert sub.eigenvalues.sum() >= 0.95 * total - 1e-9
        # smallest such dimension: dropping the last kept component dips below
        if sub.n_components > 1:
            assert sub.eigenvalues[:-1].sum() < 0.95 * total

    def test_fixed_l_capped_by_rank(self, rng):
        pts = rng.standard_normal((4, 6))  # rank 3
        model = fit_class_pca({0: pts}, n_components=10)
        assert model.classes[0].n_components == 3

    def test_orthonormal_basis(self, rng):
        for n in (5, 12, 80):
            pts = rng.standard_normal((n, 7))
            model = fit_class_pca({0: pts}, n_components=4)
            basis = model.classes[0].basis
            gram = basis.T @ basis
            np.testing.assert_allclose(gram, np.eye(basis.shape[1]), atol=1e-8)

    def test_eigenvalues_sorted_nonnegative(self, rng):
        pts = rng.standard_normal((30, 5))
        sub = fit_class_pca({0: pts}, n_components=5).classes[0]
        assert (np.diff(sub.spectrum) <= 1e-12).all()
        assert (sub.spectrum >= 0).all()

    def test_singleton_class_falls_back_to_mean(self, rng):
        pts = {0: rng.standard_normal((10, 3)), 1: rng.standard_normal((1, 3))}
        with pytest.warns(UserWarning, match="class 1"):
            model = fit_class_pca(pts, n_components=2)
        sub = model.classes[1]
        assert sub.n_components == 0
        assert fre_score(model, pts[1][0], 1) == pytest.approx(0.0, abs=1e-12)

    def test_scatter_and_gram_routes_agree(self, rng):
        # n slightly above d so both routes are applicable
        pts = rng.standard_normal((9, 6))
        centered = pts - pts.mean(axis=0)
        vals_s, vecs_s = class_covariance_eig(centered, method="scatter")
        vals_g, vecs_g = class_covariance_eig(centered, method="gram")
        rank = min(centered.shape[0] - 1, centered.shape[1])
        np.testing.assert_allclose(vals_s[:rank], vals_g[:rank], atol=1e-8)
        for keep in (1, 3, rank):
            proj_s = vecs_s[:, :keep] @ vecs_s[:, :keep].T
            proj_g = vecs_g[:, :keep] @ vecs_g[:, :keep].T
            np.testing.assert_allclose(proj_s, proj_g, atol=1e-8)

    def test_argument_validation(self, rng):
        pts = {0: rng.standard_normal((5, 3))}
        with pytest.raises(ConfigError):
            fit_class_pca(pts, n_components=2, variance_fraction=0.9)
        with pytest.raises(ConfigError):
            fit_class_pca(pts, variance_fraction=1.5)
        with pytest.raises(DataError):
            fit_class_pca({})


class TestFreScore:
    def _model(self, rng, d=5, n=60):
        pts = rng.standard_normal((n, d)) * np.array([3.0, 2.0, 1.0, 0.1, 0.05])
        return fit_class_pca({0: pts + 7.0}, n_components=3), pts + 7.0

    def test_zero_at_class_mean(self, rng):
        model, _ = self._model(rng)
        assert fre_score(model, model.classes[0].mean, 0) == pytest.approx(0.0, abs=1e-12)

    def test_zero_in_subspace(self, rng):
        model, _ = self._model(rng)
        sub = model.classes[0]
        z = sub.mean + sub.basis @ np.array([2.0, -1.0, 0.5])
        assert fre_score(model, z, 0) == pytest.approx(0.0, abs=1e-10)

    def test_orthogonal_offset_is_its_norm(self, rng):
        model, _ = self._model(rng)
        sub = model.classes[0]
        # unit vector orthogonal to the basis columns
        v = rng.standard_normal(5)
        v -= sub.basis @ (sub.basis.T @ v)
        v /= np.linalg.norm(v)
        assert fre_score(model, sub.mean + 2.0 * v, 0) == pytest.approx(2.0, abs=1e-10)

    def test_invariant_to_in_subspace_component(self, rng):
        model, _ = self._model(rng)
        sub = model.classes[0]
        z = rng.standard_normal(5)
        shifted = z + sub.basis @ np.array([1.0, 2.0, -3.0])
        assert fre_score(model, z, 0) == pytest.approx(fre_score(model, shifted, 0), abs=1e-9)

    def test_positive_homogeneity_about_mean(self, rng):
        model, _ = self._model(rng)
        sub = model.classes[0]
        z = rng.standard_normal(5) + sub.mean
        base = fre_score(model, z, 0)
        for alpha in (0.0, 0.5, 2.0, 7.5):
            blended = alpha * z + (1 - alpha) * sub.mean
            assert fre_score(model, blended, 0) == pytest.approx(alpha * base, rel=1e-9, abs=1e-12)

    def test_pythagorean_identity(self, rng):
        # sum of squared residuals / (n-1) equals the discarded eigenvalue mass
        model, pts = self._model(rng)
        sub = model.classes[0]
        residuals = fre_scores(model, pts, 0)
        lhs = (residuals ** 2).sum() / (sub.n_fit - 1)
        assert abs(lhs - sub.discarded_variance) < 1e-8

    def test_full_rank_reconstructs_fitting_data(self, rng):
        pts = rng.standard_normal((40, 5))
        model = fit_class_pca({0: pts}, n_components=5)
        assert fre_scores(model, pts, 0).max() < 1e-8

    def test_unfitted_class_errors(self, rng):
        model, _ = self._model(rng)
        with pytest.raises(UsageError):
            fre_score(model, np.zeros(5), 3)


class TestSerialization:
    def test_round_trip(self, rng, tmp_path):
        pts = {0: rng.standard_normal((20, 4)), 2: rng.standard_normal((3, 4))}
        model = fit_class_pca(pts, variance_fraction=0.9)
        path = tmp_path / "pca.ckpt"
        save_class_pca(model, path)
        back = load_class_pca(path)
        assert back.d == model.d
        assert set(back.classes) == set(model.classes)
        for k in model.classes:
            np.testing.assert_array_equal(back.classes[k].basis, model.classes[k].basis)
            np.testing.assert_array_equal(back.classes[k].mean, model.classes[k].mean)
            np.testing.assert_array_equal(back.classes[k].spectrum,
                                          model.classes[k].spectrum)
