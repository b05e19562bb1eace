"""Sampling with joint dense annotations: image, decoded depth, coarse mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .annotation import decode_depth, decode_mask
from .diffusion import NoiseSchedule, add_noise, ancestral_sample
from .encoders import word_positions
from .model import CamoGen


@dataclass
class Generation:
    images: np.ndarray       # (B, H, W, 3) in [0, 1]
    depths: np.ndarray       # (B, H, W) in [0, 1]
    masks: np.ndarray        # (B, H, W) in {0, 1}
    saliency: np.ndarray     # (B, H, W) normalised attention maps


def object_token_index(prompt: str, category: str, length: int) -> int:
    words = word_positions(prompt, length)
    return words.index(category.lower()) if category.lower() in words else min(1, len(words) - 1)


@torch.no_grad()
def sample(model: CamoGen, schedule: NoiseSchedule, prompts, references, depths, graphs,
           steps: int, seed: int, token_to_object=None) -> torch.Tensor:
    """Ancestral sampling; returns latents in [-1, 1] of shape (B, 3, H, W)."""
    if steps > schedule.num_steps:
        raise ValueError(f"steps={steps} exceeds the schedule's {schedule.num_steps}")
    model.eval()
    dtype = next(model.parameters()).dtype
    conds = model.encode(prompts, references.to(dtype), depths.to(dtype), graphs, token_to_object)
    s = model.image_size

    def denoise(z, t):
        return model.unet(z, t, conds.tau, conds.control)

    return ancestral_sample(denoise, (len(prompts), 3, s, s), schedule, steps, seed, dtype)


@torch.no_grad()
def annotate(model: CamoGen, schedule: NoiseSchedule, latents, prompts, references, depths,
             graphs, timestep: int, seed: int, threshold: float = 0.5, token_to_object=None):
    """One forward pass at ``timestep`` over the generated images: depth head
    on the shared decoder features, masks from the cross-attention maps."""
    dtype = next(model.parameters()).dtype
    conds = model.encode(prompts, references.to(dtype), depths.to(dtype), graphs, token_to_object)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(latents.shape, generator=gen, dtype=torch.float64).to(dtype)
    t = torch.full((latents.shape[0],), timestep, dtype=torch.long)
    layers = model.unet.attention_layers()
    for layer in layers:
        layer.record = True
    try:
        _, feats = model.unet(add_noise(latents, t, eps, schedule), t, conds.tau, conds.control,
                              return_features=True)
        maps = [layer.last_probs.numpy() for layer in layers]
    finally:
        for layer in layers:
            layer.record = False
            layer.last_probs = None
    s = model.image_size
    depth = decode_depth(feats, model.depth_head, s)[:, 0].numpy()
    masks, sal = [], []
    for k, (p, g) in enumerate(zip(prompts, graphs)):
        idx = object_token_index(p, g.nodes[0].category, model.cfg.text_length)
        cm = decode_mask([m[k] for m in maps], idx, threshold, s)
        masks.append(cm.mask)
        sal.append(cm.saliency)
    return depth, np.stack(masks), np.stack(sal)


def generate(model: CamoGen, schedule: NoiseSchedule, prompts, references, depths, graphs,
             steps: int, seed: int, annotation_timestep: int, threshold: float = 0.5,
             token_to_object=None) -> Generation:
    z = sample(model, schedule, prompts, references, depths, graphs, steps, seed, token_to_object)
    depth, masks, sal = annotate(model, schedule, z, prompts, references, depths, graphs,
                                 annotation_timestep, seed + 1, threshold, token_to_object)
    images = ((z.clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).to(torch.float64).numpy()
    return Generation(images, depth, masks, sal)
