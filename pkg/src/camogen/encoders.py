"""Tiny trainable stand-ins for the prompt and reference-image encoders."""

from __future__ import annotations

import re
import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F

_WORD = re.compile(r"[^\s,.;:!?]+")


def tokenize(prompt: str, length: int = 12, buckets: int = 1024) -> list[int]:
    """Hash lower-cased words into ``1..buckets-1``; 0 pads to ``length``."""
    ids = [zlib.crc32(w.encode("utf-8")) % (buckets - 1) + 1
           for w in _WORD.findall(prompt.lower())][:length]
    return ids + [0] * (length - len(ids))


def word_positions(prompt: str, length: int = 12) -> list[str]:
    return _WORD.findall(prompt.lower())[:length]


class TextEncoder(nn.Module):
    """Bag-of-tokens embedding plus learned positions."""

    def __init__(self, dim: int = 64, length: int = 12, buckets: int = 1024):
        super().__init__()
        self.length = length
        self.buckets = buckets
        self.tokens = nn.Embedding(buckets, dim)
        self.positions = nn.Parameter(torch.randn(length, dim) * 0.02)

    def encode_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tokens(ids) + self.positions

    def forward(self, prompts: list[str]) -> torch.Tensor:
        ids = torch.tensor([tokenize(p, self.length, self.buckets) for p in prompts],
                           device=self.positions.device)
        return self.encode_ids(ids)


class ReferenceEncoder(nn.Module):
    """Patch conv encoder for the reference image; one token per patch."""

    def __init__(self, dim: int = 64, image_size: int = 32, patch: int = 8, in_channels: int = 3):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, patch, stride=patch)
        self.mix = nn.Conv2d(dim, dim, 1)
        n = (image_size // patch) ** 2
        self.positions = nn.Parameter(torch.randn(n, dim) * 0.02)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = self.mix(F.silu(self.proj(image)))
        return x.flatten(2).transpose(1, 2) + self.positions
