import warnings

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from tissue_manifold.gmm import (ClusterModel, CovarianceCollapseWarning, assign_clusters,
                                 fit_gmm)


def two_blobs(seed=0, n=500, sigma=0.5):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, sigma, (n, 2))
    b = rng.normal(10.0, sigma, (n, 2))
    return np.vstack([a, b]), np.repeat([0, 1], n)


def random_instance(seed):
    rng = np.random.default_rng(seed)
    k_true = rng.integers(2, 5)
    centers = rng.normal(0, 3, (k_true, 2))
    pts = np.vstack([rng.multivariate_normal(c, np.diag(rng.uniform(0.2, 1.5, 2)), 60)
                     for c in centers])
    return pts, int(rng.integers(2, 6))


def brute_force_posterior(model, points):
    dens = np.stack([model.weights[j] * multivariate_normal(model.means[j], model.covariances[j]).pdf(points)
                     for j in range(model.k)], axis=1)
    return dens / dens.sum(axis=1, keepdims=True)


def test_single_component_closed_form(rng):
    pts = rng.normal(size=(300, 3)) @ rng.normal(size=(3, 3)) + 4.0
    model = fit_gmm(pts, k=1)
    np.testing.assert_allclose(model.means[0], pts.mean(axis=0), atol=1e-8)
    np.testing.assert_allclose(model.covariances[0], np.cov(pts.T, bias=True), atol=1e-8)
    assert model.weights[0] == pytest.approx(1.0, abs=1e-12)


def test_two_blob_recovery():
    pts, truth = two_blobs()
    model = fit_gmm(pts, k=2, seed=0)
    order = np.argsort(model.means[:, 0])
    np.testing.assert_allclose(model.means[order[0]], [0, 0], atol=0.2)
    np.testing.assert_allclose(model.means[order[1]], [10, 10], atol=0.2)
    labels, _ = assign_clusters(model, pts)
    nearer = np.argmin(((pts[:, None] - model.means[None]) ** 2).sum(-1), axis=1)
    assert np.mean(labels == nearer) >= 0.99
    assert model.converged


def test_too_few_points():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((3, 2)), k=5)


def test_non_finite_points():
    pts = np.ones((10, 2))
    pts[4, 1] = np.nan
    with pytest.raises(ValueError):
        fit_gmm(pts, k=2)


@pytest.mark.filterwarnings("ignore::tissue_manifold.gmm.CovarianceCollapseWarning")
@pytest.mark.parametrize("seed", range(10))
def test_monotone_log_likelihood(seed):
    pts, k = random_instance(seed)
    model = fit_gmm(pts, k=k, seed=seed, check_monotone=True)
    assert np.all(np.diff(model.log_likelihood_history) >= -1e-10)


def test_weights_and_spd():
    pts, k = random_instance(3)
    model = fit_gmm(pts, k=k)
    assert model.weights.sum() == pytest.approx(1.0, abs=1e-9)
    for c in model.covariances:
        np.testing.assert_allclose(c, c.T)
        assert np.all(np.linalg.eigvalsh(c) > 0)


def test_point_at_mean_gets_its_label():
    pts, _ = two_blobs()
    model = fit_gmm(pts, k=2)
    labels, _ = assign_clusters(model, model.means)
    assert list(labels) == [0, 1]


def test_responsibility_rows_normalized(rng):
    pts, k = random_instance(5)
    model = fit_gmm(pts, k=k)
    _, resp = assign_clusters(model, rng.normal(0, 5, (200, 2)))
    np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_assign_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = np.vstack([rng.normal(c, 1.0, (17, 2)) for c in ([0, 0], [3, 1], [-2, 4])])[:50]
    model = fit_gmm(pts, k=3, seed=seed)
    labels, resp = assign_clusters(model, pts)
    ref = brute_force_posterior(model, pts)
    assert np.array_equal(labels, ref.argmax(axis=1))
    np.testing.assert_allclose(resp, ref, atol=1e-12)


def test_dimension_mismatch():
    model = fit_gmm(two_blobs()[0], k=2)
    with pytest.raises(ValueError):
        assign_clusters(model, np.zeros((4, 3)))


def test_permutation_invariance():
    pts, k = random_instance(7)
    perm = np.random.default_rng(1).permutation(len(pts))
    model = fit_gmm(pts, k=k, seed=0)
    labels, _ = assign_clusters(model, pts)
    labels_p, _ = assign_clusters(model, pts[perm])
    assert np.array_equal(labels_p, labels[perm])


def test_bitwise_determinism():
    pts, k = random_instance(8)
    a, b = fit_gmm(pts, k=k, seed=4), fit_gmm(pts, k=k, seed=4)
    assert a.means.tobytes() == b.means.tobytes()
    assert a.covariances.tobytes() == b.covariances.tobytes()
    assert a.weights.tobytes() == b.weights.tobytes()


def test_json_round_trip():
    pts, k = random_instance(9)
    model = fit_gmm(pts, k=k)
    back = ClusterModel.from_json(model.to_json())
    np.testing.assert_array_equal(back.means, model.means)
    np.testing.assert_array_equal(back.covariances, model.covariances)
    assert back.converged == model.converged and back.n_iter == model.n_iter


def test_collapse_adds_ridge():
    # a component sitting on duplicated points has zero covariance
    pts = np.vstack([np.tile([5.0, 5.0], (10, 1)), np.random.default_rng(0).normal(size=(40, 2))])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = fit_gmm(pts, k=2, seed=0)
    assert any(issubclass(w.category, CovarianceCollapseWarning) for w in caught)
    assert np.all(np.isfinite(model.covariances))
    for c in model.covariances:
        assert np.all(np.linalg.eigvalsh(c) > 0)


@pytest.mark.filterwarnings("ignore::tissue_manifold.gmm.CovarianceCollapseWarning")
def test_many_components_no_underflow(rng):
    pts = rng.normal(size=(400, 2)) * 50
    model = fit_gmm(pts, k=100, seed=0, max_iter=20)
    _, resp = assign_clusters(model, pts)
    assert np.all(np.isfinite(resp))
