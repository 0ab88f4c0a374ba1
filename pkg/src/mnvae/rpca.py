"""Robust PCA enhancement of a magnitude spectrogram with a sigmoid soft mask.

The magnitude matrix ``M`` is split into a low-rank background ``L`` and a
sparse foreground ``S`` by principal component pursuit,

    minimize ||L||_* + lam * ||S||_1  subject to  M = L + S,

solved with the inexact augmented Lagrange multiplier method. The speech mask
compares ``|S| / |M|`` with the level implied by requiring ``|S| > g |L|``
under ``|M|^2 = |S|^2 + |L|^2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numerics import soft_threshold, svd

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RpcaConfig:
    lambda_scale: float = 0.3
    max_iter: int = 500
    tol: float = 1e-7
    mu_factor: float = 1.25
    rho: float = 1.5

    def __post_init__(self):
        if self.lambda_scale <= 0 or self.tol <= 0:
            raise ValueError("lambda_scale and tol must be positive")
        if self.max_iter < 1 or self.rho <= 1 or self.mu_factor <= 0:
            raise ValueError("need max_iter >= 1, rho > 1, mu_factor > 0")


@dataclass
class RpcaDecomposition:
    l: np.ndarray
    s: np.ndarray
    iterations: int
    residual: float
    converged: bool
    lam: float


def rpca_lambda(shape, lambda_scale: float) -> float:
    return lambda_scale / np.sqrt(max(shape))


def rpca_objective(l, s, lam) -> float:
    return float(np.sum(np.linalg.svd(l, compute_uv=False)) + lam * np.abs(s).sum())


def rpca(m, cfg: RpcaConfig = RpcaConfig()) -> RpcaDecomposition:
    """Inexact ALM for principal component pursuit.

    Stops when ``||M - L - S||_F / ||M||_F <= tol``; after ``max_iter`` the
    lowest-residual iterate is returned with ``converged=False``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ValueError("rpca expects a finite 2-D matrix")
    lam = rpca_lambda(m.shape, cfg.lambda_scale)
    norm_fro = np.linalg.norm(m)
    if norm_fro == 0.0:
        z = np.zeros_like(m)
        return RpcaDecomposition(z, z.copy(), 0, 0.0, True, lam)

    norm_two = np.linalg.norm(m, 2)
    y = m / max(norm_two, np.abs(m).max() / lam)
    mu = cfg.mu_factor / norm_two
    mu_max = mu * 1e7
    l = np.zeros_like(m)
    s = np.zeros_like(m)
    best = (np.inf, l, s, 0)
    for it in range(1, cfg.max_iter + 1):
        s = soft_threshold(m - l + y / mu, lam / mu)
        u, sig, vt = svd(m - s + y / mu)
        sig = np.maximum(sig - 1.0 / mu, 0.0)
        r = int(np.count_nonzero(sig))
        l = (u[:, :r] * sig[:r]) @ vt[:r]
        resid_mat = m - l - s
        resid = np.linalg.norm(resid_mat) / norm_fro
        if resid < best[0]:
            best = (resid, l, s, it)
        if resid <= cfg.tol:
            return RpcaDecomposition(l, s, it, float(resid), True, lam)
        y = y + mu * resid_mat
        mu = min(mu * cfg.rho, mu_max)
    log.warning("rpca did not reach tol %.1e in %d iterations (residual %.2e)", cfg.tol, cfg.max_iter, best[0])
    return RpcaDecomposition(best[1], best[2], cfg.max_iter, float(best[0]), False, lam)


@dataclass(frozen=True)
class MaskConfig:
    gain: float = 1.0
    alpha: float = 20.0

    def __post_init__(self):
        if self.gain < 0 or self.alpha <= 0:
            raise ValueError("need gain >= 0 and alpha > 0")


def mask_threshold(g: float) -> float:
    """``sqrt(g^2 / (1 + g^2))``: the level of ``|S|/|M|`` where ``|S| = g |L|``."""
    if g < 0:
        raise ValueError(f"gain must be nonnegative, got {g}")
    return float(np.sqrt(g * g / (1.0 + g * g)))


def magnitude_ratio(s, m) -> np.ndarray:
    s = np.abs(np.asarray(s, dtype=np.float64))
    m = np.abs(np.asarray(m, dtype=np.float64))
    out = np.zeros_like(m)
    np.divide(s, m, out=out, where=m > 0)
    return out


def soft_mask(s, m, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    """Sigmoid of ``alpha * (|S|/|M| - threshold(g))``; zero-magnitude bins have ratio 0."""
    s = np.asarray(s, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if s.shape != m.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {m.shape}")
    if np.any(m < 0):
        raise ValueError("M must be a nonnegative magnitude")
    return expit(cfg.alpha * (magnitude_ratio(s, m) - mask_threshold(cfg.gain)))


def hard_mask(s, l, g: float) -> np.ndarray:
    """Binary ``|S| > g|L|`` mask."""
    return (np.abs(s) > g * np.abs(l)).astype(np.float64)


def apply_mask(w, m) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if w.shape != m.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {m.shape}")
    return w * m


def enhance(mag, rpca_cfg: RpcaConfig = RpcaConfig(), mask_cfg: MaskConfig = MaskConfig()):
    """RPCA + soft mask on a magnitude matrix. Returns ``(speech_mag, mask, decomposition)``."""
    dec = rpca(mag, rpca_cfg)
    w = soft_mask(dec.s, mag, mask_cfg)
    return apply_mask(w, mag), w, dec
