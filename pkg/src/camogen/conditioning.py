"""Layout / semantics decoders and object-level fusion with null padding."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ConditioningBundle:
    layout: torch.Tensor       # N_o x C
    semantics: torch.Tensor    # N_o x C
    objects: torch.Tensor      # N_max x C, rows >= N_o are the null embedding
    null: torch.Tensor         # C
    num_objects: int
    max_objects: int


class FeatureDecoder(nn.Module):
    """Linear -> SiLU -> Linear, width preserved."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


def incident_edge_mean(num_nodes: int, incidence, edge_emb: torch.Tensor) -> torch.Tensor:
    """Per-node mean of incident edge embeddings; isolated nodes get all-ones."""
    dim = edge_emb.shape[1]
    out = edge_emb.new_zeros((num_nodes, dim))
    deg = edge_emb.new_zeros(num_nodes)
    if len(incidence):
        src = torch.tensor([i for i, _ in incidence], dtype=torch.long, device=edge_emb.device)
        dst = torch.tensor([j for _, j in incidence], dtype=torch.long, device=edge_emb.device)
        out = out.index_add(0, src, edge_emb).index_add(0, dst, edge_emb)
        ones = edge_emb.new_ones(len(incidence))
        deg = deg.index_add(0, src, ones).index_add(0, dst, ones)
    isolated = deg == 0
    mean = out / deg.clamp(min=1)[:, None]
    return torch.where(isolated[:, None], torch.ones_like(mean), mean)


def layout_decode(node_emb, edge_emb, incidence, decoder: nn.Module) -> torch.Tensor:
    if node_emb.shape[1] != edge_emb.shape[1]:
        raise ValueError(f"width mismatch: nodes {node_emb.shape[1]} vs edges {edge_emb.shape[1]}")
    if edge_emb.shape[0] != len(incidence):
        raise ValueError("edge embeddings are not aligned with the incidence list")
    agg = incident_edge_mean(node_emb.shape[0], incidence, edge_emb)
    return decoder(node_emb * agg)


def semantics_decode(node_emb, attr_emb, decoder: nn.Module) -> torch.Tensor:
    if node_emb.shape != attr_emb.shape:
        raise ValueError(f"shape mismatch: {tuple(node_emb.shape)} vs {tuple(attr_emb.shape)}")
    return decoder(node_emb * attr_emb)


def fuse_objects(layout, semantics, null, max_objects: int) -> torch.Tensor:
    n = layout.shape[0]
    if n > max_objects:
        raise ValueError(f"{n} objects exceed N_max={max_objects}")
    fused = layout * semantics
    pad = null.expand(max_objects - n, null.shape[-1])
    return torch.cat([fused, pad], dim=0)


class ObjectConditioner(nn.Module):
    """Turns reasoned node, attribute and edge embeddings into a ConditioningBundle."""

    def __init__(self, dim: int = 64, max_objects: int = 8):
        super().__init__()
        self.max_objects = max_objects
        self.layout_decoder = FeatureDecoder(dim)
        self.semantics_decoder = FeatureDecoder(dim)
        self.null = nn.Parameter(torch.randn(dim) * 0.02)

    def forward(self, node_emb, attr_emb, edge_emb, incidence) -> ConditioningBundle:
        lay = layout_decode(node_emb, edge_emb, incidence, self.layout_decoder)
        sem = semantics_decode(node_emb, attr_emb, self.semantics_decoder)
        objs = fuse_objects(lay, sem, self.null, self.max_objects)
        return ConditioningBundle(lay, sem, objs, self.null, node_emb.shape[0], self.max_objects)
