"""Full-covariance Gaussian mixtures fitted by expectation-maximization."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class CovarianceCollapseWarning(RuntimeWarning):
    pass


@dataclass
class ClusterModel:
    weights: np.ndarray          # (k,)
    means: np.ndarray            # (k, d)
    covariances: np.ndarray      # (k, d, d)
    converged: bool = False
    final_log_likelihood: float = float("nan")   # mean per point
    n_iter: int = 0
    log_likelihood_history: list[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k, "dim": self.dim, "converged": self.converged,
            "final_log_likelihood": self.final_log_likelihood, "n_iter": self.n_iter,
            "weights": self.weights.tolist(), "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        d = json.loads(text)
        return cls(np.asarray(d["weights"], float), np.asarray(d["means"], float),
                   np.asarray(d["covariances"], float), bool(d["converged"]),
                   float(d["final_log_likelihood"]), int(d["n_iter"]))


def _cholesky_or_ridge(cov: np.ndarray, ridge: float, label: str) -> tuple[np.ndarray, np.ndarray, bool]:
    """Cholesky factor of ``cov``; adds ``ridge * I`` (with a warning) when it is not SPD."""
    try:
        chol = np.linalg.cholesky(cov)
        if np.all(np.diag(chol) > np.sqrt(ridge) * 1e-3):
            return cov, chol, False
    except np.linalg.LinAlgError:
        pass
    warnings.warn(f"covariance of {label} collapsed; adding {ridge:g} * I",
                  CovarianceCollapseWarning, stacklevel=3)
    cov = cov + ridge * np.eye(cov.shape[0])
    return cov, np.linalg.cholesky(cov), True


def component_log_density(points: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log N(x | mean, L L^T) for every row of ``points``."""
    diff = points - mean
    sol = np.linalg.solve(chol, diff.T)          # L y = diff^T
    maha = np.einsum("ij,ij->j", sol, sol)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (points.shape[1] * LOG_2PI + logdet + maha)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _weighted_log_densities(points, weights, means, chols) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return np.stack([logw[j] + component_log_density(points, means[j], chols[j])
                     for j in range(len(weights))], axis=1)


def _estep(points, weights, means, chols):
    wld = _weighted_log_densities(points, weights, means, chols)
    lse = _logsumexp_rows(wld)
    return np.exp(wld - lse[:, None]), float(lse.mean())


def _mstep(points, resp, ridge):
    n, d = points.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ points) / nk[:, None]
    covs = np.empty((len(nk), d, d))
    chols = np.empty_like(covs)
    ridged = False
    for j in range(len(nk)):
        diff = points - means[j]
        cov = (resp[:, j, None] * diff).T @ diff / nk[j]
        cov = 0.5 * (cov + cov.T)
        covs[j], chols[j], r = _cholesky_or_ridge(cov, ridge, f"component {j}")
        ridged |= r
    return weights, means, covs, chols, ridged


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.asarray(centers)


def fit_gmm(points: np.ndarray, k: int = 100, seed: int = 0, tol: float = 1e-6,
            max_iter: int = 500, ridge: float = 1e-6, check_monotone: bool = False) -> ClusterModel:
    """EM from a k-means++ start.

    Stops when the mean per-point log-likelihood improves by less than ``tol``.
    ``check_monotone`` asserts the log-likelihood never drops (1e-10 slack) on
    iterations where no ridge had to be added.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be (N, d), got shape {points.shape}")
    n, d = points.shape
    if k < 1 or n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if not np.isfinite(points).all():
        raise ValueError("points contain non-finite values")

    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(points, k, rng)
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
    resp = np.zeros((n, k))
    resp[np.arange(n), d2.argmin(axis=1)] = 1.0
    weights, means, covs, chols, _ = _mstep(points, resp, ridge)

    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        resp, ll = _estep(points, weights, means, chols)
        if history:
            if check_monotone and not ridged and ll < history[-1] - 1e-10:
                raise AssertionError(f"EM log-likelihood decreased at iteration {it}: "
                                     f"{history[-1]!r} -> {ll!r}")
            if abs(ll - history[-1]) < tol:
                history.append(ll)
                converged = True
                break
        history.append(ll)
        weights, means, covs, chols, ridged = _mstep(points, resp, ridge)
    else:
        log.info("EM stopped at max_iter=%d without converging", max_iter)

    return ClusterModel(weights, means, covs, converged, history[-1], it, history)


def assign_clusters(model: ClusterModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hard labels (argmax posterior) and the ``(N, k)`` responsibility matrix."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != model.dim:
        raise ValueError(f"points must be (N, {model.dim}), got shape {points.shape}")
    chols = np.linalg.cholesky(model.covariances)
    resp, _ = _estep(points, model.weights, model.means, chols)
    return resp.argmax(axis=1), resp
