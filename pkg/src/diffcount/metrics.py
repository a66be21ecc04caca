"""Failure rates, Frechet distance, and rank/linear correlations.

Rates from a batch of verdicts:
    chr  = #(ready and hallucinated) / n
    ncfr = #(not ready) / n
    tfr  = chr + ncfr   (exact identity on the underlying counts)

The Frechet distance between two feature sets fits a Gaussian to each
(unbiased covariance) and evaluates
    |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)),
computing the matrix square root through a symmetric eigendecomposition
of S1^(1/2) S2 S1^(1/2) with negative eigenvalues clamped to zero.

Correlation p-values use the two-sided t approximation
t = r sqrt((n-2) / (1 - r^2)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

__all__ = [
    "FailureRates",
    "CorrelationResult",
    "InsufficientSamplesError",
    "failure_rates",
    "frechet_distance",
    "pearson",
    "spearman",
    "DownsampleFeatures",
    "RandomConvFeatures",
]


class InsufficientSamplesError(ValueError):
    """Too few samples for a stable estimate."""


@dataclass(frozen=True)
class FailureRates:
    chr: float
    ncfr: float
    tfr: float
    n: int


@dataclass(frozen=True)
class CorrelationResult:
    coefficient: float
    p_value: float
    n: int


def failure_rates(verdicts) -> FailureRates:
    verdicts = list(verdicts)
    n = len(verdicts)
    if n == 0:
        raise ValueError("empty verdict list")
    n_ch = sum(1 for v in verdicts if v.counting_ready and v.is_hallucination)
    n_ncf = sum(1 for v in verdicts if not v.counting_ready)
    # tfr is defined as the sum of the two rates (exact identity)
    return FailureRates(chr=n_ch / n, ncfr=n_ncf / n,
                        tfr=n_ch / n + n_ncf / n, n=n)


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(mat)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def frechet_distance(feats_a, feats_b) -> float:
    """Gaussian Frechet distance between two feature samples."""
    A = np.atleast_2d(np.asarray(feats_a, dtype=float))
    B = np.atleast_2d(np.asarray(feats_b, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dims differ: {A.shape[1]} vs {B.shape[1]}")
    d = A.shape[1]
    if len(A) < d + 1 or len(B) < d + 1:
        raise InsufficientSamplesError(
            f"need at least d+1={d + 1} samples per side, "
            f"got {len(A)} and {len(B)}")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    Sa = np.cov(A, rowvar=False, ddof=1)
    Sb = np.cov(B, rowvar=False, ddof=1)
    Sa = np.atleast_2d(Sa)
    Sb = np.atleast_2d(Sb)
    sqrt_a = _sqrtm_psd(Sa)
    cross = _sqrtm_psd(sqrt_a @ Sb @ sqrt_a)
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(Sa) + np.trace(Sb) - 2.0 * np.trace(cross))
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# correlations
# ---------------------------------------------------------------------------

def _t_pvalue(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = abs(r) * np.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * sstats.t.sf(t, df=n - 2))


def pearson(xs, ys) -> CorrelationResult:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D sequences")
    n = len(x)
    if n < 3:
        raise ValueError(f"need n >= 3, got {n}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("degenerate input: zero variance")
    r = float(np.dot(xc, yc) / (sx * sy))
    r = float(np.clip(r, -1.0, 1.0))
    return CorrelationResult(coefficient=r, p_value=_t_pvalue(r, n), n=n)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1 with ties receiving the mean of their span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> CorrelationResult:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D sequences")
    if len(x) < 3:
        raise ValueError(f"need n >= 3, got {len(x)}")
    return pearson(_average_ranks(x), _average_ranks(y))


# ---------------------------------------------------------------------------
# desk-scale feature extractors
# ---------------------------------------------------------------------------

class DownsampleFeatures:
    """Block-mean pooled pixels as a fixed-dimension feature vector."""

    def __init__(self, out_size: int = 8):
        self.out_size = out_size
        self.dim = out_size * out_size

    def __call__(self, images: np.ndarray) -> np.ndarray:
        arr = np.asarray(images, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        n, H, W = arr.shape
        if H % self.out_size or W % self.out_size:
            raise ValueError(f"image size ({H},{W}) not divisible into "
                             f"{self.out_size} blocks")
        fh, fw = H // self.out_size, W // self.out_size
        pooled = arr.reshape(n, self.out_size, fh, self.out_size, fw).mean(
            axis=(2, 4))
        return pooled.reshape(n, self.dim)


class RandomConvFeatures:
    """Frozen random convolution bank followed by average pooling.

    Four fixed-seed 5x5 kernels, valid convolution, tanh, then 4x4
    average pooling per kernel map. Deterministic for a given seed.
    """

    def __init__(self, seed: int = 0, n_kernels: int = 4, kernel: int = 5,
                 pool: int = 4):
        rng = np.random.default_rng(seed)
        self.kernels = rng.standard_normal((n_kernels, kernel, kernel))
        self.kernels /= kernel
        self.pool = pool
        self.dim = n_kernels * pool * pool

    def __call__(self, images: np.ndarray) -> np.ndarray:
        import cv2
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        feats = np.empty((len(arr), self.dim))
        for i, img in enumerate(arr):
            maps = []
            for k in self.kernels:
                conv = cv2.filter2D(img, -1, k.astype(np.float32),
                                    borderType=cv2.BORDER_REPLICATE)
                act = np.tanh(conv)
                h, w = act.shape
                fh, fw = h // self.pool, w // self.pool
                pooled = act[:fh * self.pool, :fw * self.pool].reshape(
                    self.pool, fh, self.pool, fw).mean(axis=(1, 3))
                maps.append(pooled.ravel())
            feats[i] = np.concatenate(maps)
        return feats
