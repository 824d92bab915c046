"""Sample-quality metrics: FID, KID, k-NN precision/recall and mode coverage.

FID and KID here are computed on features from a fixed-seed random conv
stack (or raw pixels), not Inception, so absolute values are only comparable
within this package.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from diffgan import tensor as T
from diffgan.errors import ArgumentError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureExtractor:
    """``raw_pixels`` or an untrained ``random_conv`` stack with fixed seed."""

    kind: str = "random_conv"
    seed: int = 0
    width: int = 64
    depth: int = 3

    def __post_init__(self):
        if self.kind not in ("raw_pixels", "random_conv"):
            raise ArgumentError(f"unknown feature extractor {self.kind!r}")

    def describe(self) -> str:
        if self.kind == "raw_pixels":
            return "raw_pixels"
        return f"random_conv(seed={self.seed},width={self.width},depth={self.depth})"

    def kernels(self, channels: int) -> list[np.ndarray]:
        rng = T.Rng(self.seed, T.stream_id("feature_extractor"))
        widths = [max(self.width // 2 ** (self.depth - 1 - i), 8) for i in range(self.depth)]
        widths[-1] = self.width
        out, c_in = [], channels
        for w in widths:
            k = rng.normal((w, c_in, 3, 3)) * math.sqrt(2.0 / (c_in * 9))
            out.append(k)
            c_in = w
        return out


def extract_features(images: np.ndarray, extractor: FeatureExtractor,
                     batch: int = 256) -> np.ndarray:
    """Map images ``[n, C, H, W]`` in [-1, 1] to a feature matrix ``[n, d]``."""
    if isinstance(images, (list, tuple)):
        if len({np.shape(im) for im in images}) > 1:
            raise ArgumentError("extract_features: images must share one shape")
    images = np.asarray(images)
    if images.dtype == object or images.ndim < 2:
        raise ArgumentError("extract_features: images must share one shape")
    if extractor.kind == "raw_pixels":
        return ((images.reshape(len(images), -1).astype(np.float64)) + 1.0) / 2.0
    if images.ndim != 4:
        raise ArgumentError(f"random_conv features need NCHW images, got {images.shape}")
    kernels = extractor.kernels(images.shape[1])
    feats = []
    for i in range(0, len(images), batch):
        x = images[i:i + batch].astype(np.float64)
        for k in kernels:
            x = T.conv2d_value(x, k, stride=2 if min(x.shape[2:]) >= 8 else 1, pad=1)
            x = np.where(x > 0, x, 0.2 * x)
        feats.append(x.mean(axis=(2, 3)))
    return np.concatenate(feats, axis=0)


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of the rows of ``features``."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ArgumentError(f"fit_gaussian needs at least 2 rows, got shape {f.shape}")
    mu = f.mean(axis=0)
    dev = f - mu
    sigma = dev.T @ dev / (f.shape[0] - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2.0)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    floor = -1e-6 * max(float(np.max(np.abs(vals))), 1e-300)
    if np.any(vals < floor):
        log.warning("matrix square root: clamping eigenvalues down to %.3g", vals.min())
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ArgumentError(f"fid: dimension mismatch {a.mu.shape} vs {b.mu.shape}")
    for s in (a.sigma, b.sigma):
        if not np.allclose(s, s.T, rtol=1e-8, atol=1e-12):
            raise ArgumentError("fid: covariance is not symmetric")
    if a is b or (np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)):
        return 0.0
    root_a = _psd_sqrt(a.sigma)
    cross = _psd_sqrt(root_a @ b.sigma @ root_a)
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``(x . y / d + 1)^3`` for all row pairs."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(a: np.ndarray, b: np.ndarray) -> float:
    m, n = len(a), len(b)
    kaa = poly_kernel(a, a)
    kbb = poly_kernel(b, b)
    kab = poly_kernel(a, b)
    saa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    sbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(saa + sbb - 2.0 * kab.mean())


def kid(feats_a: np.ndarray, feats_b: np.ndarray, block_size: int = 500) -> float:
    """Unbiased polynomial-kernel MMD^2 averaged over disjoint row blocks.

    Both sides are split into the same number of consecutive blocks of at
    most ``block_size`` rows (at least one block).
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ArgumentError("kid needs at least 2 rows per side")
    if a.shape[1] != b.shape[1]:
        raise ArgumentError(f"kid: feature dims {a.shape[1]} vs {b.shape[1]}")
    n_blocks = max(1, min(len(a), len(b)) // block_size)
    a_parts = np.array_split(a, n_blocks)
    b_parts = np.array_split(b, n_blocks)
    return float(np.mean([mmd2_unbiased(x, y) for x, y in zip(a_parts, b_parts)]))


def _pairwise_dist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # cdist differences coordinates directly, so coincident points sit at exactly 0
    return cdist(x, y)


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    d = _pairwise_dist(x, x)
    np.fill_diagonal(d, 0.0)
    # column 0 of the sorted row is the point itself
    return np.sort(d, axis=1, kind="stable")[:, k]


def _inside(points: np.ndarray, centers: np.ndarray, radii: np.ndarray,
            block: int = 1024) -> np.ndarray:
    hit = np.zeros(len(points), dtype=bool)
    for i in range(0, len(points), block):
        d = _pairwise_dist(points[i:i + block], centers)
        hit[i:i + block] = np.any(d <= radii[None, :], axis=1)
    return hit


def precision_recall(feats_real: np.ndarray, feats_fake: np.ndarray,
                     k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision and recall.

    Precision is the fraction of fake rows inside some real k-NN ball; recall
    is the fraction of real rows inside some fake k-NN ball.
    """
    r = np.asarray(feats_real, dtype=np.float64)
    f = np.asarray(feats_fake, dtype=np.float64)
    if len(r) <= k or len(f) <= k:
        raise ArgumentError(f"precision_recall needs more than k={k} rows per side")
    precision = float(_inside(f, r, _knn_radii(r, k)).mean())
    recall = float(_inside(r, f, _knn_radii(f, k)).mean())
    return precision, recall


def mode_coverage(samples_2d: np.ndarray, centers: np.ndarray,
                  radius: float) -> tuple[int, float]:
    """Count modes holding at least 1% of the samples within ``radius``.

    Also returns the fraction of samples within ``radius`` of any center.
    """
    s = np.asarray(samples_2d, dtype=np.float64).reshape(len(samples_2d), -1)
    c = np.asarray(centers, dtype=np.float64)
    if len(c) == 0 or radius <= 0:
        raise ArgumentError("mode_coverage needs centers and a positive radius")
    d = _pairwise_dist(s, c)
    nearest = d.argmin(axis=1)
    close = d[np.arange(len(s)), nearest] <= radius
    counts = np.bincount(nearest[close], minlength=len(c))
    covered = int(np.sum(counts >= 0.01 * len(s)))
    return covered, float(close.mean())


def evaluate(real_images: np.ndarray, fake_images: np.ndarray,
             extractor: FeatureExtractor, k: int = 3, block_size: int = 500) -> dict:
    """FID, KID and precision/recall on one shared feature extractor."""
    fr = extract_features(real_images, extractor)
    ff = extract_features(fake_images, extractor)
    p, r = precision_recall(fr, ff, k)
    return {
        "fid": fid(fit_gaussian(fr), fit_gaussian(ff)),
        "kid": kid(fr, ff, block_size),
        "precision": p,
        "recall": r,
        "n_real": int(len(fr)),
        "n_fake": int(len(ff)),
        "extractor": extractor.describe(),
    }
