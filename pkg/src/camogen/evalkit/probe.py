"""Downstream check: a tiny segmenter trained on a fixed budget."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import mean_metrics


@dataclass
class ProbeConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 3e-3
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.width < 1:
            raise ValueError(f"invalid probe budget: {self}")


class TinySegmenter(nn.Module):
    """Two-level encoder-decoder with one skip connection."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.enc1 = nn.Sequential(nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(width, width, 3, padding=1), nn.ReLU())
        self.enc2 = nn.Sequential(nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
                                  nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU())
        self.dec = nn.Sequential(nn.Conv2d(3 * width, width, 3, padding=1), nn.ReLU(),
                                 nn.Conv2d(width, 1, 1))

    def forward(self, x):
        a = self.enc1(x)
        b = F.interpolate(self.enc2(a), size=a.shape[-2:], mode="nearest")
        return self.dec(torch.cat([a, b], dim=1))[:, 0]


def _tensors(pairs):
    images = np.stack([np.asarray(p[0], np.float32) for p in pairs])
    masks = np.stack([(np.asarray(p[1]) > 0).astype(np.float32) for p in pairs])
    return torch.from_numpy(images).permute(0, 3, 1, 2), torch.from_numpy(masks)


def as_pairs(records) -> list:
    return [(r.image, r.gt_mask) for r in records]


def train_segmenter(train_set, cfg: ProbeConfig = ProbeConfig()) -> TinySegmenter:
    if len(train_set) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    net = TinySegmenter(cfg.width)
    x, y = _tensors(train_set)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.steps):
        idx = torch.from_numpy(rng.choice(len(x), size=min(cfg.batch_size, len(x)), replace=False))
        loss = F.binary_cross_entropy_with_logits(net(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net.eval()


@torch.no_grad()
def predict(net: TinySegmenter, images) -> np.ndarray:
    x = torch.from_numpy(np.stack([np.asarray(i, np.float32) for i in images])).permute(0, 3, 1, 2)
    return torch.sigmoid(net(x)).double().numpy()


def downstream_probe(train_set, test_set, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Train on ``(image, mask)`` pairs; mean MAE / S / E / weighted-F on the test pairs."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    net = train_segmenter(train_set, cfg)
    preds = predict(net, [p[0] for p in test_set])
    return mean_metrics(preds, [p[1] for p in test_set])
