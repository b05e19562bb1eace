"""Attribute-aware mask attention.

Visual tokens, fused object embeddings and self-attended attribute tokens are
concatenated into one sequence; an additive entity mask only lets tokens of
the same entity see each other. Null-padding slots (entity ``-1``) only see
themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

BLOCKED = -1e9
PAD_ENTITY = -1


@dataclass(frozen=True)
class EntityTokenMap:
    entity_ids: tuple[int, ...]
    num_visual: int
    max_objects: int

    @property
    def length(self) -> int:
        return len(self.entity_ids)


def assign_entities(num_objects: int, num_visual: int, max_objects: int,
                    token_to_object: Sequence[int | None] | None = None) -> EntityTokenMap:
    """Entity ids over ``[V, C_hat, E_attr]``.

    Visual token ``k`` takes ``token_to_object[k]``; ``None`` (or a missing
    assignment) maps to the shared background id ``num_objects``. Object and
    attribute slot ``i`` take id ``i`` for real objects and ``-1`` for padding.
    """
    if num_objects > max_objects:
        raise ValueError(f"{num_objects} objects exceed N_max={max_objects}")
    if token_to_object is None:
        token_to_object = [None] * num_visual
    if len(token_to_object) != num_visual:
        raise ValueError(f"assignment covers {len(token_to_object)} of {num_visual} visual tokens")
    visual = []
    for k, obj in enumerate(token_to_object):
        if obj is None:
            visual.append(num_objects)
        elif not 0 <= obj < num_objects:
            raise ValueError(f"visual token {k} assigned to object {obj}, graph has {num_objects}")
        else:
            visual.append(int(obj))
    slots = [i if i < num_objects else PAD_ENTITY for i in range(max_objects)]
    return EntityTokenMap(tuple(visual + slots + slots), num_visual, max_objects)


def scene_entity_map(num_objects: int, num_visual: int, max_objects: int) -> EntityTokenMap:
    """Inference-time map: every real token belongs to one scene entity."""
    if num_objects > max_objects:
        raise ValueError(f"{num_objects} objects exceed N_max={max_objects}")
    slots = [0 if i < num_objects else PAD_ENTITY for i in range(max_objects)]
    return EntityTokenMap(tuple([0] * num_visual + slots + slots), num_visual, max_objects)


def build_attention_mask(m: EntityTokenMap | Sequence[int], dtype=torch.float32) -> torch.Tensor:
    ids = torch.as_tensor(m.entity_ids if isinstance(m, EntityTokenMap) else list(m))
    allowed = (ids[:, None] == ids[None, :]) & (ids[:, None] != PAD_ENTITY)
    allowed |= torch.eye(len(ids), dtype=torch.bool)
    zero = torch.zeros((), dtype=dtype)
    return torch.where(allowed, zero, torch.full((), BLOCKED, dtype=dtype))


def masked_attention(q, k, v, mask=None, heads: int = 1) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d_head) + mask) v`` with ``heads`` heads.

    Inputs are ``(L, C)`` or ``(B, L, C)``; ``mask`` is ``(L, L)`` or ``(B, L, L)``.
    """
    squeeze = q.dim() == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
    if mask is not None and mask.dim() == 2:
        mask = mask[None]
    b, lq, c = q.shape
    lk = k.shape[1]
    if c % heads:
        raise ValueError(f"width {c} not divisible by {heads} heads")
    if mask is not None:
        assert bool((mask.amax(dim=-1) > BLOCKED / 2).all()), "fully blocked attention row"
    d = c // heads
    qh = q.view(b, lq, heads, d).transpose(1, 2)
    kh = k.view(b, lk, heads, d).transpose(1, 2)
    vh = v.view(b, lk, heads, d).transpose(1, 2)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        logits = logits + mask[:, None].to(logits.dtype)
    out = torch.softmax(logits, dim=-1) @ vh
    out = out.transpose(1, 2).reshape(b, lq, c)
    return out[0] if squeeze else out


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention with a residual connection."""

    def __init__(self, dim: int, heads: int = 4, zero_out: bool = False):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x, mask=None):
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        return x + self.out(masked_attention(q, k, v, mask, self.heads))


class AMALayer(nn.Module):
    """One masked attention block plus a feed-forward sublayer."""

    def __init__(self, dim: int = 64, heads: int = 4):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))

    def forward(self, x, mask):
        x = self.attn(x, mask)
        return x + self.ff(self.ff_norm(x))


def ama_forward(visual, objects, attrs, entity_map, layer: AMALayer, mask=None) -> torch.Tensor:
    """Run the AMA layer over ``[visual, objects, attrs]`` and keep the visual rows.

    ``entity_map`` may be a single EntityTokenMap or one per batch element.
    """
    c = visual.shape[-1]
    if objects.shape[-1] != c or attrs.shape[-1] != c:
        raise ValueError("visual, object and attribute tokens must share one width")
    n_v = visual.shape[-2]
    x = torch.cat([visual, objects, attrs], dim=-2)
    if mask is None:
        maps = entity_map if isinstance(entity_map, (list, tuple)) else [entity_map]
        mask = torch.stack([build_attention_mask(m, x.dtype) for m in maps])
        if visual.dim() == 2:
            mask = mask[0]
    if mask.shape[-1] != x.shape[-2]:
        raise ValueError(f"mask covers {mask.shape[-1]} tokens, sequence has {x.shape[-2]}")
    return layer(x, mask)[..., :n_v, :]


class StreamEncoders(nn.Module):
    """Separate self-attention for the text, image and attribute streams."""

    def __init__(self, dim: int = 64, heads: int = 4):
        super().__init__()
        self.text = SelfAttention(dim, heads)
        self.image = SelfAttention(dim, heads)
        self.attr = SelfAttention(dim, heads)

    def forward(self, text, image, attr):
        visual = torch.cat([self.text(text), self.image(image)], dim=-2)
        return visual, self.attr(attr)


def self_attend_streams(text, image, attr, streams: StreamEncoders):
    return streams(text, image, attr)


def allowed_count(entity_ids: Sequence[int]) -> int:
    """Closed form for the number of allowed mask entries."""
    ids = np.asarray(entity_ids)
    real = ids[ids != PAD_ENTITY]
    _, counts = np.unique(real, return_counts=True)
    return int((counts ** 2).sum() + (ids == PAD_ENTITY).sum())
