"""Pixel-space diffusion backbone: schedule, cross-attention U-Net, condition
fusion, losses and ancestral sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NoiseSchedule:
    betas: torch.Tensor

    def __post_init__(self):
        b = self.betas.to(torch.float64)
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.betas = b
        self.alphas = 1.0 - b
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, num_steps: int = 200, beta_start: float | None = None,
               beta_end: float | None = None) -> "NoiseSchedule":
        # endpoints scaled from the 1000-step reference schedule
        scale = 1000.0 / num_steps
        beta_start = 1e-4 * scale if beta_start is None else beta_start
        beta_end = 0.02 * scale if beta_end is None else beta_end
        return cls(torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64))


def add_noise(z0, t, eps, schedule: NoiseSchedule):
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t >= schedule.num_steps).any():
        raise IndexError(f"timestep out of range [0, {schedule.num_steps})")
    ab = schedule.alpha_bars.to(z0.dtype)[t]
    ab = ab.reshape(ab.shape + (1,) * (z0.dim() - ab.dim()))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.as_tensor(t, dtype=torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class CrossAttention(nn.Module):
    """Multi-head cross-attention; optionally records the attention probabilities."""

    def __init__(self, query_dim: int, context_dim: int, heads: int = 4, dim: int | None = None):
        super().__init__()
        dim = dim or query_dim
        self.heads = heads
        self.q = nn.Linear(query_dim, dim, bias=False)
        self.k = nn.Linear(context_dim, dim, bias=False)
        self.v = nn.Linear(context_dim, dim, bias=False)
        self.out = nn.Linear(dim, query_dim)
        self.record = False
        self.last_probs = None

    def forward(self, x, context):
        b, lq, _ = x.shape
        lk = context.shape[1]
        h = self.heads
        q = self.q(x).view(b, lq, h, -1).transpose(1, 2)
        k = self.k(context).view(b, lk, h, -1).transpose(1, 2)
        v = self.v(context).view(b, lk, h, -1).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        if self.record:
            self.last_probs = probs.detach()
        out = (probs @ v).transpose(1, 2).reshape(b, lq, -1)
        return self.out(out)


class Fuse(nn.Module):
    """Text tokens query the reference and AMA tokens; residual onto the text.

    The output projection starts at zero, so an untrained Fuse returns the
    text embedding unchanged.
    """

    def __init__(self, dim: int = 64, heads: int = 4):
        super().__init__()
        self.attn = CrossAttention(dim, dim, heads)
        nn.init.zeros_(self.attn.out.weight)
        nn.init.zeros_(self.attn.out.bias)

    def forward(self, text, reference, visual=None):
        for name, x in (("reference", reference), ("visual", visual)):
            if x is not None and x.shape[-1] != text.shape[-1]:
                raise ValueError(f"{name} width {x.shape[-1]} != text width {text.shape[-1]}")
        context = reference if visual is None else torch.cat([reference, visual], dim=1)
        return text + self.attn(text, context)


def fuse_conditions(text_emb, reference, visual, fuse: Fuse):
    return fuse(text_emb, reference, visual)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialCrossAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int = 4, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.attn = CrossAttention(channels, context_dim, heads)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        return x + self.attn(tokens, context).transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    """Three-resolution U-Net with cross-attention at the coarsest level.

    ``control`` residuals (coarsest first: mid, skip2, skip1, skip0) are added
    to the middle block output and to the skip connections the decoder reads.
    """

    def __init__(self, in_channels: int = 3, channels: int = 32, context_dim: int = 64,
                 heads: int = 4, image_size: int = 32):
        super().__init__()
        c1, c2 = channels, 2 * channels
        temb = 4 * channels
        self.temb_dim = channels
        self.time_mlp = nn.Sequential(nn.Linear(channels, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.down0 = ResBlock(c1, c1, temb)
        self.pool0 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down1 = ResBlock(c1, c2, temb)
        self.pool1 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, temb)
        self.down2_attn = SpatialCrossAttention(c2, context_dim, heads)
        self.mid = ResBlock(c2, c2, temb)
        self.mid_attn = SpatialCrossAttention(c2, context_dim, heads)
        self.up2 = ResBlock(2 * c2, c2, temb)
        self.up2_attn = SpatialCrossAttention(c2, context_dim, heads)
        self.up1 = ResBlock(2 * c2, c2, temb)
        self.up0 = ResBlock(c2 + c1, c1, temb)
        self.out_norm = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, in_channels, 3, padding=1)
        s = image_size
        self.control_stages = [(c2, s // 4), (c2, s // 4), (c2, s // 2), (c1, s)]

    def attention_layers(self) -> list[CrossAttention]:
        return [self.down2_attn.attn, self.mid_attn.attn, self.up2_attn.attn]

    def forward(self, x, t, context, control=None, return_features: bool = False):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"latent {h}x{w} must be divisible by 4")
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(x.dtype))
        s0 = self.down0(self.conv_in(x), temb)
        s1 = self.down1(self.pool0(s0), temb)
        s2 = self.down2_attn(self.down2(self.pool1(s1), temb), context)
        m = self.mid_attn(self.mid(s2, temb), context)
        if control is not None:
            r_mid, r2, r1, r0 = control
            if r_mid.shape != m.shape or r2.shape != s2.shape or r1.shape != s1.shape \
                    or r0.shape != s0.shape:
                raise ValueError("control residual shapes do not match the decoder stages")
            m, s2, s1, s0 = m + r_mid, s2 + r2, s1 + r1, s0 + r0
        u = self.up2_attn(self.up2(torch.cat([m, s2], 1), temb), context)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.up1(torch.cat([u, s1], 1), temb)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        feats = self.up0(torch.cat([u, s0], 1), temb)
        out = self.conv_out(F.silu(self.out_norm(feats)))
        return (out, feats) if return_features else out


def mse(a, b):
    return ((a - b) ** 2).mean()


def total_loss(ldm, dlc, lambda1: float = 1.0, lambda2: float = 1.0):
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda1 * ldm + lambda2 * dlc


def respaced_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    if not 1 <= steps <= schedule.num_steps:
        raise ValueError(f"steps must be in [1, {schedule.num_steps}]")
    T = schedule.num_steps
    return sorted({round(x) for x in torch.linspace(0, T - 1, steps).tolist()}, reverse=True)


@torch.no_grad()
def ancestral_sample(denoise, shape, schedule: NoiseSchedule, steps: int, seed: int,
                     dtype=torch.float32, clip: float | None = 1.0):
    """DDPM ancestral sampling over a respaced subset of timesteps.

    ``denoise(z_t, t)`` returns the predicted noise for a batch.
    """
    ts = respaced_timesteps(schedule, steps)
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    ab = schedule.alpha_bars
    for k, t in enumerate(ts):
        ab_t = ab[t]
        ab_prev = ab[ts[k + 1]] if k + 1 < len(ts) else torch.tensor(1.0, dtype=torch.float64)
        beta = 1 - ab_t / ab_prev
        tt = torch.full((shape[0],), t, dtype=torch.long)
        eps = denoise(z, tt).to(torch.float64)
        z64 = z.to(torch.float64)
        x0 = (z64 - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()
        if clip is not None:
            x0 = x0.clamp(-clip, clip)
        mean = (ab_prev.sqrt() * beta / (1 - ab_t)) * x0 \
            + ((1 - beta).sqrt() * (1 - ab_prev) / (1 - ab_t)) * z64
        if k + 1 < len(ts):
            var = beta * (1 - ab_prev) / (1 - ab_t)
            noise = torch.randn(shape, generator=gen, dtype=torch.float64)
            z64 = mean + var.sqrt() * noise
        else:
            z64 = mean
        z = z64.to(dtype)
    return z
