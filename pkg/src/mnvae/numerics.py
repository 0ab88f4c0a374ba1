"""Dense linear-algebra kernels shared by RPCA, node estimation and the VAE.

Everything is float64. ``svd`` defaults to LAPACK (``gesdd`` via numpy) with a
sign convention applied so results are reproducible; ``method="jacobi"``
selects a one-sided Jacobi implementation that is slower but self-contained.
"""

from __future__ import annotations

import numpy as np

JACOBI_TOL = 1e-12


class NumericsError(ValueError):
    pass


def _as_finite_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise NumericsError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError("matrix has non-finite entries")
    return a


def _fix_signs(u, s, vt):
    # largest-|.| entry of each right singular vector made positive
    idx = np.argmax(np.abs(vt), axis=1)
    sgn = np.sign(vt[np.arange(vt.shape[0]), idx])
    sgn[sgn == 0] = 1.0
    return u * sgn[None, :], s, vt * sgn[:, None]


def svd(m, method: str = "lapack"):
    """Thin SVD ``m = u @ diag(sigma) @ vt`` with ``r = min(rows, cols)``.

    Returns
    -------
    u : (rows, r) array
    sigma : (r,) nonincreasing, nonnegative
    vt : (r, cols) array
    """
    a = _as_finite_matrix(m)
    if method == "lapack":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    elif method == "jacobi":
        u, s, vt = jacobi_svd(a)
    else:
        raise ValueError(f"unknown svd method {method!r}")
    return _fix_signs(u, s, vt)


def jacobi_svd(a, tol: float = JACOBI_TOL, max_sweeps: int = 60):
    """One-sided (Hestenes) Jacobi SVD.

    Columns of a working copy are orthogonalized pairwise with plane rotations
    until every pair satisfies ``|a_i . a_j| <= tol * |a_i| |a_j|``.
    """
    a = _as_finite_matrix(a)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = w[:, i] @ w[:, i]
                beta = w[:, j] @ w[:, j]
                gamma = w[:, i] @ w[:, j]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wi = w[:, i].copy()
                w[:, i] = c * wi - s * w[:, j]
                w[:, j] = s * wi + c * w[:, j]
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            break
    sigma = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    big = sigma > 0
    u[:, big] = w[:, big] / sigma[big]
    if not np.all(big):
        u = _complete_orthonormal(u, big)
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def _complete_orthonormal(u, filled):
    # fill columns for zero singular values with an orthonormal complement
    m = u.shape[0]
    basis = u[:, filled]
    q, _ = np.linalg.qr(np.concatenate([basis, np.eye(m)], axis=1))
    out = u.copy()
    out[:, ~filled] = q[:, basis.shape[1]:basis.shape[1] + int((~filled).sum())]
    return out


def sv_threshold(m, tau: float, method: str = "lapack") -> np.ndarray:
    """Singular value shrinkage, the prox operator of ``tau * ||.||_*``."""
    if tau < 0:
        raise NumericsError(f"tau must be nonnegative, got {tau}")
    u, s, vt = svd(m, method=method)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def soft_threshold(m, tau: float) -> np.ndarray:
    """Elementwise ``sign(x) * max(|x| - tau, 0)``."""
    if tau < 0:
        raise NumericsError(f"tau must be nonnegative, got {tau}")
    a = np.asarray(m, dtype=np.float64)
    return np.sign(a) * np.maximum(np.abs(a) - tau, 0.0)


def pca_project(x, k: int) -> np.ndarray:
    """Center ``x`` (n x d) and project onto its top-``k`` principal axes.

    Each axis is oriented so its largest-magnitude loading is positive.
    """
    a = _as_finite_matrix(x)
    n, d = a.shape
    if n < 2:
        raise NumericsError("PCA needs at least two rows")
    if not 1 <= k <= d:
        raise NumericsError(f"k must be in [1, {d}], got {k}")
    c = a - a.mean(axis=0, keepdims=True)
    _, _, vt = svd(c)
    return c @ vt[:k].T


def randn(shape, seed) -> np.ndarray:
    """Standard normal samples from numpy's PCG64 generator (Ziggurat method)."""
    return np.random.Generator(np.random.PCG64(seed)).standard_normal(shape)


def rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
