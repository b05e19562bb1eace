"""Dense-prediction metrics for camouflaged object segmentation.

``pred`` is a map in [0, 1]; ``gt`` a binary mask of the same shape. S-measure,
E-measure and weighted F-measure min-max normalise a non-constant ``pred``
first, as the reference evaluation code does.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

EPS = np.spacing(1)


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt > 0.5


def _normalise(pred):
    lo, hi = pred.min(), pred.max()
    return (pred - lo) / (hi - lo) if hi > lo else pred


def mae(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(np.abs(pred - gt).mean())


# -- S-measure ----------------------------------------------------------------

def _s_object(x, region):
    vals = x[region]
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sigma + EPS)


def _object_score(pred, gt):
    fg = np.where(gt, pred, 0.0)
    bg = np.where(~gt, 1 - pred, 0.0)
    u = gt.mean()
    return u * _s_object(fg, gt) + (1 - u) * _s_object(bg, ~gt)


def _centroid(gt):
    """1-based centroid, rounded half away from zero (MATLAB ``round``)."""
    h, w = gt.shape
    if not gt.any():
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    ys, xs = np.nonzero(gt)
    return int(np.floor(xs.mean() + 1 + 0.5)), int(np.floor(ys.mean() + 1 + 0.5))


def _ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    d = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / d
    sy = ((gt - y) ** 2).sum() / d
    sxy = ((pred - x) * (gt - y)).sum() / d
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _region_score(pred, gt):
    h, w = gt.shape
    x, y = _centroid(gt)
    g = gt.astype(np.float64)
    area = h * w
    parts = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    weights = [x * y / area, y * (w - x) / area, (h - y) * x / area]
    weights.append(1 - sum(weights))
    score = 0.0
    for (rs, cs), wt in zip(parts, weights):
        if pred[rs, cs].size == 0:
            continue  # empty quadrant carries zero weight
        score += wt * _ssim(pred[rs, cs], g[rs, cs])
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _check(pred, gt)
    pred = _normalise(pred)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    return float(max(0.0, alpha * _object_score(pred, gt) + (1 - alpha) * _region_score(pred, gt)))


# -- E-measure ----------------------------------------------------------------

def _enhanced_alignment(binary, gt):
    n = gt.size
    if not gt.any():
        return (~binary).sum() / n
    if gt.all():
        return binary.sum() / n
    fm = binary.astype(np.float64)
    g = gt.astype(np.float64)
    a = fm - fm.mean()
    b = g - g.mean()
    align = 2 * a * b / (a * a + b * b + EPS)
    return float(((align + 1) ** 2 / 4).sum() / n)


E_THRESHOLDS = np.arange(1, 256) / 255.0


def e_measure(pred, gt, thresholds=E_THRESHOLDS) -> float:
    """Mean enhanced-alignment measure over the thresholds ``pred >= k/255``."""
    pred, gt = _check(pred, gt)
    pred = _normalise(pred)
    levels = np.unique(pred)
    # pred >= t only depends on the first level at or above t
    keys = np.searchsorted(levels, np.asarray(thresholds, dtype=np.float64), side="left")
    scores = {k: _enhanced_alignment(pred >= levels[k] if k < len(levels) else np.zeros_like(gt), gt)
              for k in np.unique(keys)}
    return float(np.mean([scores[k] for k in keys]))


def adaptive_e_measure(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    pred = _normalise(pred)
    thr = min(2 * pred.mean(), 1.0)
    return float(_enhanced_alignment(pred >= thr, gt) if thr > 0 else _enhanced_alignment(pred > 0, gt))


# -- weighted F-measure -------------------------------------------------------

def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    m = (size - 1) / 2
    yy, xx = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(xx * xx + yy * yy) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def nearest_foreground(gt) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distance to, and flat index of, the nearest ``gt`` pixel.

    Ties go to the lowest row-major index.
    """
    h, w = gt.shape
    fg = np.flatnonzero(gt)
    ys, xs = np.divmod(np.arange(h * w), w)
    fy, fx = np.divmod(fg, w)
    dist = np.empty(h * w)
    idx = np.empty(h * w, dtype=np.int64)
    for start in range(0, h * w, 4096):
        sl = slice(start, start + 4096)
        d2 = (ys[sl, None] - fy[None]) ** 2 + (xs[sl, None] - fx[None]) ** 2
        k = d2.argmin(axis=1)  # first minimum == lowest index
        dist[sl] = np.sqrt(d2[np.arange(d2.shape[0]), k])
        idx[sl] = fg[k]
    return dist.reshape(h, w), idx.reshape(h, w)


def weighted_f(pred, gt, beta2: float = 1.0) -> float:
    pred, gt = _check(pred, gt)
    pred = _normalise(pred)
    if not gt.any():
        return float(1 - pred.mean())
    g = gt.astype(np.float64)
    err = np.abs(pred - g)
    dist, idx = nearest_foreground(gt)
    et = np.where(gt, err, err.ravel()[idx])
    ea = ndimage.correlate(et, gaussian_kernel(7, 5.0), mode="constant", cval=0.0)
    min_e_ea = np.where(gt & (ea < err), ea, err)
    b = np.where(gt, 1.0, 2 - np.exp(np.log(0.5) / 5 * dist))
    ew = min_e_ea * b
    tpw = g.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    r = 1 - ew[gt].mean()
    p = tpw / (tpw + fpw + EPS)
    return float((1 + beta2) * r * p / (r + beta2 * p + EPS))


def segmentation_metrics(pred, gt) -> dict:
    return {"mae": mae(pred, gt), "s_measure": s_measure(pred, gt),
            "e_measure": e_measure(pred, gt), "weighted_f": weighted_f(pred, gt)}


def mean_metrics(preds, gts) -> dict:
    rows = [segmentation_metrics(p, g) for p, g in zip(preds, gts)]
    if not rows:
        raise ValueError("no prediction / ground-truth pairs")
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
