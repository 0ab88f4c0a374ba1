"""Latent node-count estimation from the 2-D PCA density of spectrogram frames.

Frames are projected onto their first two principal components and Gaussian
mixtures with an increasing number of components are fitted by EM. With one
component reserved for the non-speech residual, the elbow of the training
log-likelihood curve at ``n`` clusters suggests ``n - 1`` latent nodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .numerics import pca_project

COV_FLOOR = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 500
N_RESTARTS = 5


@dataclass
class GmmFit:
    weights: np.ndarray        # [k]
    means: np.ndarray          # [k, d]
    covariances: np.ndarray    # [k, d, d]
    train_log_likelihood: float
    n_iter: int = 0
    converged: bool = True
    degenerate: bool = False
    history: np.ndarray | None = None

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def log_density(self, x) -> np.ndarray:
        return logsumexp(_component_logpdf(np.asarray(x, dtype=np.float64), self), axis=1)


@dataclass
class LikelihoodCurve:
    ks: list[int]
    log_likelihoods: list[float]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["k", "log_likelihood"])
            for k, ll in zip(self.ks, self.log_likelihoods):
                wr.writerow([k, repr(ll)])


def frame_features(specs) -> np.ndarray:
    """Stack all frames of all spectrograms and project them to 2-D."""
    mats = [np.asarray(getattr(s, "mag", s), dtype=np.float64) for s in specs]
    if not mats:
        raise ValueError("no spectrograms given")
    x = np.concatenate(mats, axis=0)
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 frames, got {x.shape[0]}")
    return pca_project(x, 2)


def density_grid(features, bins: int = 50):
    """2-D histogram of projected frames as ``(x_center, y_center, count)`` rows."""
    counts, xe, ye = np.histogram2d(features[:, 0], features[:, 1], bins=bins)
    xc = 0.5 * (xe[:-1] + xe[1:])
    yc = 0.5 * (ye[:-1] + ye[1:])
    return [(float(xc[i]), float(yc[j]), int(counts[i, j])) for i in range(bins) for j in range(bins)]


def write_density_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "y", "count"])
        wr.writerows(rows)


def _floor_cov(cov):
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, COV_FLOOR)
    return (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def _component_logpdf(x, fit):
    """log(w_j N(x_i | mean_j, cov_j)) as an [n, k] array."""
    d = x.shape[1]
    chol = np.linalg.cholesky(fit.covariances)
    diff = x[None, :, :] - fit.means[:, None, :]                     # [k, n, d]
    sol = np.linalg.solve(chol[:, None], diff[..., None])[..., 0]    # L^-1 (x - m)
    maha = np.sum(sol * sol, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    lp = -0.5 * (maha + logdet[:, None] + d * np.log(2.0 * np.pi))
    return (lp + np.log(fit.weights)[:, None]).T


def _kmeanspp(x, k, gen):
    n = x.shape[0]
    centers = [x[gen.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = gen.integers(n) if total <= 0 else gen.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _em(x, k, gen, tol, max_iter):
    n, d = x.shape
    means = _kmeanspp(x, k, gen)
    labels = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    history = []
    fit = None
    prev = -np.inf
    for it in range(max_iter):
        nk = resp.sum(axis=0) + 1e-300
        means = (resp.T @ x) / nk[:, None]
        diff = x[None] - means[:, None]
        covs = np.einsum("kn,kni,knj->kij", resp.T, diff, diff) / nk[:, None, None]
        fit = GmmFit(nk / n, means, _floor_cov(covs), 0.0)
        logp = _component_logpdf(x, fit)
        ll_point = logsumexp(logp, axis=1)
        ll = float(ll_point.mean())
        history.append(ll)
        resp = np.exp(logp - ll_point[:, None])
        if ll - prev < tol:
            fit.n_iter, fit.converged = it + 1, True
            break
        prev = ll
    else:
        fit.n_iter, fit.converged = max_iter, False
    fit.train_log_likelihood = history[-1]
    fit.history = np.array(history)
    return fit


def fit_gmm(x, k: int, seed: int = 0, restarts: int = N_RESTARTS,
            tol: float = EM_TOL, max_iter: int = EM_MAX_ITER) -> GmmFit:
    """Full-covariance EM, best of ``restarts`` k-means++ initializations.

    ``train_log_likelihood`` is the mean per-point log density.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be [n, d]")
    if k < 1 or x.shape[0] < k:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={x.shape[0]}")
    degenerate = bool(np.all(np.ptp(x, axis=0) == 0))
    gen = np.random.Generator(np.random.PCG64(seed))
    best = None
    for _ in range(restarts):
        fit = _em(x, k, gen, tol, max_iter)
        if best is None or fit.train_log_likelihood > best.train_log_likelihood:
            best = fit
    best.degenerate = degenerate
    return best


def likelihood_curve(x, k_range, seed: int = 0, **kw) -> LikelihoodCurve:
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("empty k range")
    if ks[-1] > np.asarray(x).shape[0]:
        raise ValueError("more components than points")
    lls = [fit_gmm(x, k, seed=seed, **kw).train_log_likelihood for k in ks]
    return LikelihoodCurve(ks, lls)


@dataclass(frozen=True)
class NodeEstimate:
    clusters: int
    nodes: int
    nodes_safe: int


def estimate_nodes(curve: LikelihoodCurve, gain_ratio_threshold: float = 0.1,
                   min_total_gain: float = 0.15) -> NodeEstimate:
    """Elbow of the likelihood curve.

    The gain of adding one component at ``n`` is divided by the total gain over
    the curve; the elbow ``n*`` is the first ``n`` whose next gain falls below
    ``gain_ratio_threshold``. A curve whose total gain is under
    ``min_total_gain`` nats per point is flat, giving ``n* = ks[0]``.
    Nodes are ``max(n* - 1, 1)``; the safe recommendation adds two.
    """
    ks = list(curve.ks)
    ll = np.asarray(curve.log_likelihoods, dtype=np.float64)
    if len(ks) < 2:
        raise ValueError("likelihood curve needs at least two points")
    gains = np.diff(ll) / np.diff(ks)
    total = ll.max() - ll[0]
    elbow = ks[-1]
    if total < min_total_gain:
        elbow = ks[0]
    else:
        for i, gain in enumerate(gains):
            if gain / total < gain_ratio_threshold:
                elbow = ks[i]
                break
    nodes = max(elbow - 1, 1)
    return NodeEstimate(elbow, nodes, nodes + 2)
