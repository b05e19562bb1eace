"""Depth-layout coherence guided control branch.

The depth condition is encoded into patch tokens, the scene layout is folded
in through a learnable ``C x C`` projection, a small set of learnable query
tokens summarises the result into prototypes, and the coherence loss pulls
every fused token towards its nearest prototype in cosine distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

COS_EPS = 1e-8


@dataclass
class DepthLayoutState:
    depth_tokens: torch.Tensor   # F_D, (B, N, C)
    fused: torch.Tensor          # F_Q, (B, N, C)
    prototypes: torch.Tensor     # P, (B, M, C)
    loss: torch.Tensor           # scalar


class DepthEncoder(nn.Module):
    """Patchwise encoder: a ``p x p`` stride-``p`` conv followed by a 1x1 conv,
    so each token only sees its own patch."""

    def __init__(self, dim: int = 64, patch: int = 4, in_channels: int = 1):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_channels, dim, patch, stride=patch)
        self.mix = nn.Conv2d(dim, dim, 1)

    def forward(self, depth: torch.Tensor) -> torch.Tensor:
        if depth.dim() == 2:
            return self.forward(depth[None, None])[0]
        if depth.dim() == 3:
            depth = depth[:, None]
        h, w = depth.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ValueError(f"depth map {h}x{w} not divisible by patch stride {self.patch}")
        x = self.mix(F.silu(self.proj(depth)))
        return x.flatten(2).transpose(1, 2)


def encode_depth(depth, encoder: DepthEncoder) -> torch.Tensor:
    if not torch.isfinite(depth).all():
        raise ValueError("depth map has non-finite values")
    return encoder(depth)


def fuse_depth_layout(depth_tokens, layout, w_layout) -> torch.Tensor:
    """``F_Q = F_D + mean(F_lay) W_L``, the layout mean broadcast over all tokens.

    ``depth_tokens`` is ``(N, C)`` with ``layout`` ``(N_o, C)``, or batched
    ``(B, N, C)`` with a precomputed per-sample layout mean ``(B, C)``.
    """
    c = depth_tokens.shape[-1]
    if layout.shape[-1] != c or w_layout.shape != (c, c):
        raise ValueError(f"width mismatch: F_D {c}, F_lay {layout.shape[-1]}, "
                         f"W_L {tuple(w_layout.shape)}")
    if depth_tokens.dim() == 2:
        return depth_tokens + (layout.mean(dim=0) @ w_layout)[None, :]
    return depth_tokens + (layout @ w_layout)[:, None, :]


def prototype_attention(queries, tokens) -> torch.Tensor:
    """Row-stochastic attention of ``queries`` (M, C) over ``tokens`` (..., N, C)."""
    scale = 1.0 / math.sqrt(queries.shape[-1])
    return torch.softmax(queries @ tokens.transpose(-1, -2) * scale, dim=-1)


class PrototypeSummarizer(nn.Module):
    def __init__(self, dim: int = 64, num_prototypes: int = 8):
        super().__init__()
        if num_prototypes < 1:
            raise ValueError("need at least one prototype")
        self.queries = nn.Parameter(torch.randn(num_prototypes, dim) * dim ** -0.5)
        self.out = nn.Linear(dim, dim)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return self.out(prototype_attention(self.queries, fused) @ fused)


def summarize_prototypes(queries, fused, out_proj: nn.Module) -> torch.Tensor:
    return out_proj(prototype_attention(queries, fused) @ fused)


def cosine_matrix(a, b, eps: float = COS_EPS) -> torch.Tensor:
    an = a / a.norm(dim=-1, keepdim=True).clamp(min=eps)
    bn = b / b.norm(dim=-1, keepdim=True).clamp(min=eps)
    return an @ bn.transpose(-1, -2)


def dlc_loss(fused, prototypes, eps: float = COS_EPS) -> torch.Tensor:
    """Mean over tokens of the cosine distance to the nearest prototype.

    Batched inputs ``(B, N, C)`` / ``(B, M, C)`` are averaged over the batch.
    Ties pick the lowest prototype index, so the backward pass is deterministic.
    """
    dist = 1.0 - cosine_matrix(fused, prototypes, eps)
    best = dist.argmin(dim=-1, keepdim=True)
    return dist.gather(-1, best).mean()


class ControlBranch(nn.Module):
    """Maps fused depth-layout tokens to residuals for the denoiser skips.

    Residual shapes follow ``stages``: a list of ``(channels, resolution)``
    pairs ordered from coarsest to finest. Every output goes through a
    zero-initialised 1x1 conv, so a fresh branch contributes exactly zero.
    """

    def __init__(self, dim: int, grid: int, stages):
        super().__init__()
        self.grid = grid
        self.stages = list(stages)
        self.stem = nn.Sequential(nn.Conv2d(dim, dim, 3, padding=1), nn.SiLU(),
                                  nn.Conv2d(dim, dim, 3, padding=1), nn.SiLU())
        self.blocks = nn.ModuleList()
        self.zero_convs = nn.ModuleList()
        ch = dim
        for out_ch, _res in self.stages:
            self.blocks.append(nn.Sequential(nn.Conv2d(ch, out_ch, 3, padding=1), nn.SiLU()))
            zc = nn.Conv2d(out_ch, out_ch, 1)
            nn.init.zeros_(zc.weight)
            nn.init.zeros_(zc.bias)
            self.zero_convs.append(zc)
            ch = out_ch

    def forward(self, fused: torch.Tensor) -> list[torch.Tensor]:
        b, n, c = fused.shape
        if n != self.grid * self.grid:
            raise ValueError(f"expected {self.grid ** 2} tokens, got {n}")
        x = self.stem(fused.transpose(1, 2).reshape(b, c, self.grid, self.grid))
        out = []
        for (_ch, res), block, zc in zip(self.stages, self.blocks, self.zero_convs):
            if x.shape[-1] != res:
                x = F.interpolate(x, size=(res, res), mode="nearest")
            x = block(x)
            out.append(zc(x))
        return out


def control_residuals(fused, branch: ControlBranch) -> list[torch.Tensor]:
    return branch(fused)


class DLCG(nn.Module):
    """Depth encoder, layout projection W_L, prototypes and control branch."""

    def __init__(self, dim: int, image_size: int, patch: int, num_prototypes: int, stages,
                 use_layout: bool = True):
        super().__init__()
        self.use_layout = use_layout
        self.encoder = DepthEncoder(dim, patch)
        self.w_layout = nn.Parameter(torch.randn(dim, dim) * dim ** -0.5)
        self.summarizer = PrototypeSummarizer(dim, num_prototypes)
        self.control = ControlBranch(dim, image_size // patch, stages)

    def forward(self, depth, layout_mean) -> DepthLayoutState:
        f_d = encode_depth(depth, self.encoder)
        if not self.use_layout:
            # plain depth ControlNet: no layout fusion, no coherence term
            return DepthLayoutState(f_d, f_d, f_d.new_zeros((f_d.shape[0], 0, f_d.shape[-1])),
                                    f_d.new_zeros(()))
        f_q = fuse_depth_layout(f_d, layout_mean, self.w_layout)
        protos = self.summarizer(f_q)
        return DepthLayoutState(f_d, f_q, protos, dlc_loss(f_q, protos))
