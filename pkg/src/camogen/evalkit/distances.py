"""Feature-distribution distances between image sets.

The default extractor is an untrained convolutional net with fixed seeded
weights, hence "proxy": the numbers only compare sets under the same extractor.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg

MIN_SET_SIZE = 8
RIDGE = 1e-6


class RandomConvFeatures(nn.Module):
    """Three conv layers with fixed random weights. Each layer contributes the
    spatial mean and standard deviation of its channels, so texture statistics
    count as much as color."""

    def __init__(self, seed: int = 0, width: int = 32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList([nn.Conv2d(3, 16, 3, padding=1),
                                    nn.Conv2d(16, width, 3, stride=2, padding=1),
                                    nn.Conv2d(width, width, 3, stride=2, padding=1)])
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2 / fan_in) ** 0.5)
                conv.bias.zero_()
        self.double().requires_grad_(False)

    @torch.no_grad()
    def forward(self, images) -> np.ndarray:
        """``images``: (N, H, W, 3) in [0, 1] -> (N, 32 + 4 * width) float64."""
        x = torch.as_tensor(np.asarray(images), dtype=torch.float64)
        if x.dim() != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) images, got {tuple(x.shape)}")
        x = x.permute(0, 3, 1, 2) * 2 - 1
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats += [x.mean(dim=(2, 3)), x.std(dim=(2, 3))]
        return torch.cat(feats, dim=1).numpy()


_DEFAULT = None


def default_extractor() -> RandomConvFeatures:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = RandomConvFeatures(seed=0)
    return _DEFAULT


def frechet_distance(mu1, cov1, mu2, cov2, ridge: float = RIDGE) -> float:
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    diff = mu1 - mu2
    covmean = linalg.sqrtm(cov1 @ cov2)
    if not np.isfinite(covmean).all() or np.abs(np.imag(covmean)).max() > 1e-6:
        off = np.eye(cov1.shape[0]) * ridge
        covmean = linalg.sqrtm((cov1 + off) @ (cov2 + off))
    covmean = np.real(covmean)
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(covmean), 0.0))


def fid_from_features(fa, fb) -> float:
    fa, fb = np.asarray(fa, np.float64), np.asarray(fb, np.float64)
    if np.array_equal(fa, fb):
        return 0.0
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def polynomial_kernel(x, y, degree: int = 3, coef: float = 1.0):
    return (x @ y.T / x.shape[1] + coef) ** degree


def kid_from_features(fa, fb) -> float:
    """Unbiased MMD^2 with the kernel ``(x.y / d + 1)^3``."""
    fa, fb = np.asarray(fa, np.float64), np.asarray(fb, np.float64)
    m, n = len(fa), len(fb)
    kxx, kyy, kxy = polynomial_kernel(fa, fa), polynomial_kernel(fb, fb), polynomial_kernel(fa, fb)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kid_lower_bound(fa, fb) -> float:
    """Floor of the unbiased estimator for these sets.

    Since the biased estimate is non-negative, the unbiased one cannot drop
    below ``-(mean diag Kxx)/(m-1) - (mean diag Kyy)/(n-1) + (mean Kxx)/(m-1)
    + (mean Kyy)/(n-1)``; the value is O(1/m).
    """
    fa, fb = np.asarray(fa, np.float64), np.asarray(fb, np.float64)
    m, n = len(fa), len(fb)
    kxx, kyy = polynomial_kernel(fa, fa), polynomial_kernel(fb, fb)
    return float((kxx.mean() - np.diag(kxx).mean()) / (m - 1)
                 + (kyy.mean() - np.diag(kyy).mean()) / (n - 1))


def kid_subsets(fa, fb, subsets: int = 50, size: int | None = None, seed: int = 0):
    """Mean and standard deviation of the estimator over random subsets."""
    fa, fb = np.asarray(fa, np.float64), np.asarray(fb, np.float64)
    size = size or min(len(fa), len(fb)) // 2
    size = max(size, 2)
    rng = np.random.default_rng(seed)
    vals = [kid_from_features(fa[rng.choice(len(fa), size, replace=False)],
                              fb[rng.choice(len(fb), size, replace=False)]) for _ in range(subsets)]
    return float(np.mean(vals)), float(np.std(vals))


def feature_distance(set_a, set_b, extractor=None, kind: str = "kid-proxy") -> float:
    if len(set_a) < MIN_SET_SIZE or len(set_b) < MIN_SET_SIZE:
        raise ValueError(f"need at least {MIN_SET_SIZE} images per set, "
                         f"got {len(set_a)} and {len(set_b)}")
    extractor = extractor or default_extractor()
    fa, fb = extractor(set_a), extractor(set_b)
    if kind == "fid-proxy":
        return fid_from_features(fa, fb)
    if kind == "kid-proxy":
        return kid_from_features(fa, fb)
    raise ValueError(f"unknown distance kind {kind!r}")
