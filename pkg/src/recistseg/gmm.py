"""Gaussian mixtures over 1-3 channel pixel features, fitted by EM."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

COV_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None]
    return x


def floor_covariance(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Clamp eigenvalues of a symmetric matrix to at least ``floor``.

    This is the exact maximiser of the Gaussian likelihood under the
    eigenvalue constraint, so EM stays monotone with it in the M-step.
    """
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    return (v * np.maximum(w, floor)) @ v.T


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihoods: tuple[float, ...] = field(default=(), repr=False)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def n_channels(self) -> int:
        return self.means.shape[1]

    def component_log_densities(self, x) -> np.ndarray:
        """(n, k) array of log w_k + log N(x; mu_k, Sigma_k)."""
        x = _as_samples(x)
        out = np.empty((len(x), self.k))
        c = self.n_channels
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        for j in range(self.k):
            chol = np.linalg.cholesky(self.covariances[j])
            z = np.linalg.solve(chol, (x - self.means[j]).T)
            maha = np.einsum("ij,ij->j", z, z)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[:, j] = logw[j] - 0.5 * (c * _LOG_2PI + logdet + maha)
        return out

    def neg_log_density(self, x):
        """-log sum_k w_k N(x; mu_k, Sigma_k); scalar in, scalar out."""
        scalar = np.ndim(x) == 0 or (np.ndim(x) == 1 and self.n_channels > 1 and len(x) == self.n_channels)
        xs = np.asarray(x, dtype=float).reshape(1, -1) if scalar else _as_samples(x)
        v = -logsumexp(self.component_log_densities(xs), axis=1)
        return float(v[0]) if scalar else v

    def log_likelihood(self, x) -> float:
        return float(logsumexp(self.component_log_densities(x), axis=1).sum())


def assign_components(gmm: GaussianMixture, samples) -> np.ndarray:
    """Most responsible component per sample (ties go to the lowest index)."""
    x = _as_samples(samples)
    if len(x) == 0:
        return np.zeros(0, dtype=int)
    return np.argmax(gmm.component_log_densities(x), axis=1)


def neg_log_density(gmm: GaussianMixture, x):
    return gmm.neg_log_density(x)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(x, resp, prev_means, prev_covs, cov_floor):
    n, c = x.shape
    nk = resp.sum(axis=0)
    weights = nk / n
    means = prev_means.copy()
    covs = prev_covs.copy()
    for j in range(resp.shape[1]):
        if nk[j] <= 1e-10 * n:
            continue  # keep previous parameters: a generalised-EM step, still monotone
        mu = resp[:, j] @ x / nk[j]
        d = x - mu
        cov = (resp[:, j, None] * d).T @ d / nk[j]
        means[j] = mu
        covs[j] = floor_covariance(cov, cov_floor)
    return weights, means, covs


def fit(samples, k: int, max_iter: int = 100, seed=None, tol: float = 1e-6,
        init: GaussianMixture | None = None, cov_floor: float = COV_FLOOR) -> GaussianMixture:
    """Fit a k-component full-covariance mixture by EM.

    Starts from k-means++ seeds (or from ``init`` when warm-starting) and stops
    after ``max_iter`` iterations or once the relative log-likelihood change
    drops below ``tol``. The returned model carries the per-iteration
    log-likelihoods, the first entry being that of the starting parameters.
    """
    x = _as_samples(samples)
    n, c = x.shape
    if not 1 <= c <= 3:
        raise ValueError(f"expected 1-3 channels, got {c}")
    if n == 0:
        raise ValueError("cannot fit a mixture to zero samples")
    if init is not None:
        weights, means, covs = init.weights.copy(), init.means.copy(), init.covariances.copy()
        if means.shape[1] != c:
            raise ValueError("warm-start model has a different channel count")
    else:
        if n < k:
            warnings.warn(f"{n} samples < {k} components; reducing k to {n}", stacklevel=2)
            k = n
        rng = np.random.default_rng(seed)
        centers = _kmeanspp(x, k, rng)
        nearest = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        resp = np.zeros((n, k))
        resp[np.arange(n), nearest] = 1.0
        glob_cov = floor_covariance(np.atleast_2d(np.cov(x.T, bias=True)), cov_floor)
        weights, means, covs = _m_step(x, resp, centers.copy(), np.repeat(glob_cov[None], k, 0), cov_floor)

    gmm = GaussianMixture(weights, means, covs)
    logp = gmm.component_log_densities(x)
    ll = float(logsumexp(logp, axis=1).sum())
    history = [ll]
    for _ in range(max_iter):
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        weights, means, covs = _m_step(x, resp, gmm.means, gmm.covariances, cov_floor)
        gmm = GaussianMixture(weights, means, covs)
        logp = gmm.component_log_densities(x)
        new = float(logsumexp(logp, axis=1).sum())
        history.append(new)
        done = abs(new - ll) <= tol * max(abs(ll), 1e-300)
        ll = new
        if done:
            break
    return GaussianMixture(gmm.weights, gmm.means, gmm.covariances, tuple(history))
