"""Dense annotation heads: depth decoding, attention-derived coarse masks,
environment-aware color and refinement through pluggable clients."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import palette
from .clients import ClientError, RefinerClient

log = logging.getLogger(__name__)


class DepthHead(nn.Module):
    """conv3x3 -> SiLU -> conv1x1 with a zero final layer and 0.5 bias."""

    def __init__(self, channels: int, hidden: int = 16):
        super().__init__()
        self.conv = nn.Conv2d(channels, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.constant_(self.out.bias, 0.5)

    def forward(self, feats, size: int | None = None):
        if size is not None and feats.shape[-1] != size:
            feats = F.interpolate(feats, size=(size, size), mode="bilinear", align_corners=False)
        return self.out(F.silu(self.conv(feats))).clamp(0.0, 1.0)


def decode_depth(features: torch.Tensor, head: DepthHead, size: int | None = None) -> torch.Tensor:
    if features.dim() != 4 or features.shape[1] != head.conv.in_channels:
        raise ValueError(f"expected (B, {head.conv.in_channels}, h, w) features, "
                         f"got {tuple(features.shape)}")
    out = head(features, size)
    assert bool(((out >= 0) & (out <= 1)).all())
    return out


@dataclass
class CoarseMask:
    mask: np.ndarray
    threshold: float
    saliency: np.ndarray


def attention_saliency(maps, token_index: int, size: int | None = None) -> np.ndarray:
    """Mean over layers and heads of one context token's attention map.

    ``maps`` is a list of per-layer arrays ``(heads, h*w, tokens)`` or already
    spatial ``(heads, h, w, tokens)``; layers are resized to ``size`` first.
    """
    acc = []
    for layer in maps:
        a = torch.as_tensor(np.asarray(layer), dtype=torch.float64)
        if not 0 <= token_index < a.shape[-1]:
            raise IndexError(f"token index {token_index} outside {a.shape[-1]} context tokens")
        a = a[..., token_index]
        if a.dim() == 2:
            side = int(round(a.shape[-1] ** 0.5))
            a = a.reshape(a.shape[0], side, side)
        m = a.mean(0)
        if size is not None and m.shape[-1] != size:
            m = F.interpolate(m[None, None], size=(size, size), mode="bilinear",
                              align_corners=False)[0, 0]
        acc.append(m)
    return torch.stack(acc).mean(0).numpy()


def decode_mask(maps, token_index: int, threshold: float = 0.5, size: int | None = None) -> CoarseMask:
    sal = attention_saliency(maps, token_index, size)
    lo, hi = float(sal.min()), float(sal.max())
    if hi - lo <= 1e-12:
        return CoarseMask(np.zeros(sal.shape, dtype=np.uint8), threshold, np.zeros_like(sal))
    norm = (sal - lo) / (hi - lo)
    return CoarseMask((norm >= threshold).astype(np.uint8), threshold, norm)


class EnvColorError(ValueError):
    """No background attribute names a color; generation runs unconditioned."""


def derive_env_color(fg_attribute: str, bg_attributes) -> tuple[str, tuple[float, float, float]]:
    """Majority color word among the background attributes; ties go to the
    earliest in scene-graph order. The foreground attribute does not vote."""
    if not bg_attributes:
        raise ValueError("background attribute list is empty")
    words = [w for w in (palette.color_word(a) for a in bg_attributes) if w is not None]
    if not words:
        raise EnvColorError(f"no color word in {list(bg_attributes)}")
    counts = Counter(words)
    best = max(counts.values())
    word = next(w for w in words if counts[w] == best)
    return word, palette.COLORS[word]


def environment_color_for(graph) -> tuple[str, tuple[float, float, float]]:
    """Env color for node 0 against every other node of the graph."""
    return derive_env_color(graph.nodes[0].attribute, [n.attribute for n in graph.nodes[1:]])


def recolor_reference(reference: np.ndarray, color, strength: float = 0.5) -> np.ndarray:
    """Pull the non-empty pixels of a reference cut-out towards ``color``."""
    ref = np.asarray(reference, dtype=np.float64)
    fg = ref.sum(axis=-1, keepdims=True) > 0
    tinted = (1 - strength) * ref + strength * np.asarray(color, dtype=np.float64)
    return np.where(fg, tinted, ref)


@dataclass
class RefineResult:
    depth: np.ndarray
    mask: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def refined(self) -> bool:
        return not self.warnings


def refine(depth, mask, refiner: RefinerClient) -> RefineResult:
    """Delegate to the refiner; on client failure return the inputs unrefined."""
    depth = np.asarray(depth)
    mask = np.asarray(mask)
    warnings = []
    try:
        new_depth = refiner.refine(depth, "depth")
    except (ClientError, OSError, TimeoutError) as exc:
        log.warning("depth refiner unavailable: %s", exc)
        warnings.append(f"depth: {exc}")
        new_depth = depth
    try:
        new_mask = refiner.refine(mask, "mask")
    except (ClientError, OSError, TimeoutError) as exc:
        log.warning("mask refiner unavailable: %s", exc)
        warnings.append(f"mask: {exc}")
        new_mask = mask
    return RefineResult(np.asarray(new_depth), np.asarray(new_mask), warnings)
