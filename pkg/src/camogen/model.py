"""The full conditional generator: scene-graph conditioning, AMA, condition
fusion, the depth-layout control branch and the U-Net denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .ama import AMALayer, StreamEncoders, ama_forward, assign_entities, build_attention_mask, \
    scene_entity_map
from .annotation import DepthHead
from .conditioning import ConditioningBundle, ObjectConditioner
from .config import Config, ModelConfig
from .diffusion import Fuse, NoiseSchedule, UNet, add_noise, mse
from .dlcg import DLCG, DepthLayoutState
from .encoders import TextEncoder
from .encoders import ReferenceEncoder
from .scene_graph import EmbeddingTables, RelationalReasoning, SceneGraph, Vocabulary, embed_graph

VARIANTS = {"base": (False, False), "ama": (False, True), "dlcg": (True, False),
            "full": (True, True)}


@dataclass
class DiffusionBatch:
    z0: torch.Tensor              # (B, 3, H, W) in [-1, 1]
    t: torch.Tensor               # (B,) long
    eps: torch.Tensor             # like z0
    prompts: list
    reference: torch.Tensor       # (B, 3, H, W) in [0, 1]
    depth: torch.Tensor           # (B, 1, H, W) in [0, 1]
    graphs: list
    token_to_object: list | None = None
    depth_target: torch.Tensor | None = None


@dataclass
class Conditions:
    text: torch.Tensor
    reference: torch.Tensor
    visual: torch.Tensor | None
    tau: torch.Tensor
    dlcg: DepthLayoutState
    control: list
    bundles: list


def foreground_reference(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Foreground cut-out used as the reference image during training."""
    return image * (np.asarray(mask) > 0)[..., None]


def patch_assignment(mask: np.ndarray, patch: int, num_objects: int) -> list:
    """Reference-image patch -> object: majority-foreground patches belong to
    node 0, the rest to node 1 (the surface) when the graph has one."""
    m = (np.asarray(mask) > 0).astype(np.float64)
    h, w = m.shape
    frac = m.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3)).ravel()
    other = 1 if num_objects > 1 else None
    return [0 if f > 0.5 else other for f in frac]


class CamoGen(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, image_size: int = 32):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.image_size = image_size
        d = cfg.dim
        self.tables = EmbeddingTables.for_vocabulary(vocab, d)
        self.reasoning = RelationalReasoning(d, cfg.gcn_rounds)
        self.objects = ObjectConditioner(d, cfg.max_objects)
        self.text_encoder = TextEncoder(d, cfg.text_length, cfg.text_buckets)
        self.reference_encoder = ReferenceEncoder(d, image_size, cfg.reference_patch)
        self.streams = StreamEncoders(d, cfg.heads)
        self.ama = AMALayer(d, cfg.heads)
        self.fuse = Fuse(d, cfg.heads)
        self.unet = UNet(3, cfg.channels, d, cfg.heads, image_size)
        self.dlcg = DLCG(d, image_size, cfg.depth_patch, cfg.prototypes, self.unet.control_stages,
                         use_layout=cfg.use_dlcg)
        self.depth_head = DepthHead(cfg.channels)

    @property
    def num_reference_tokens(self) -> int:
        return (self.image_size // self.cfg.reference_patch) ** 2

    @property
    def num_visual_tokens(self) -> int:
        return self.cfg.text_length + self.num_reference_tokens

    # -- conditioning ---------------------------------------------------------

    def graph_bundle(self, g: SceneGraph) -> tuple[ConditioningBundle, torch.Tensor]:
        node, attr, edge = embed_graph(g, self.vocab, self.tables)
        inc = g.incidence
        h = self.reasoning(inc, node, attr, edge)
        return self.objects(h, attr, edge, inc), attr

    def entity_map(self, g: SceneGraph, token_to_object):
        n_v, n_max = self.num_visual_tokens, self.cfg.max_objects
        if token_to_object is None:
            return scene_entity_map(g.num_objects, n_v, n_max)
        full = list(token_to_object)
        if len(full) == self.num_reference_tokens:
            full = [None] * self.cfg.text_length + full  # text tokens: background entity
        return assign_entities(g.num_objects, n_v, n_max, full)

    def encode(self, prompts, reference, depth, graphs, token_to_object=None) -> Conditions:
        text = self.text_encoder(prompts)
        ref = self.reference_encoder(reference)
        bundles, attrs, maps = [], [], []
        n_max = self.cfg.max_objects
        for k, g in enumerate(graphs):
            bundle, attr = self.graph_bundle(g)
            bundles.append(bundle)
            attrs.append(torch.cat([attr, attr.new_zeros((n_max - attr.shape[0], attr.shape[1]))]))
            maps.append(self.entity_map(g, None if token_to_object is None else token_to_object[k]))
        layout_mean = torch.stack([b.layout.mean(0) for b in bundles])
        visual = None
        if self.cfg.use_ama:
            attr_ids = [[0] * g.num_objects + [-1] * (n_max - g.num_objects) for g in graphs]
            attr_mask = torch.stack([build_attention_mask(a, text.dtype) for a in attr_ids])
            visual_tokens = torch.cat([self.streams.text(text), self.streams.image(ref)], dim=1)
            attr_tilde = self.streams.attr(torch.stack(attrs), attr_mask)
            objs = torch.stack([b.objects for b in bundles])
            visual = ama_forward(visual_tokens, objs, attr_tilde, maps, self.ama)
        tau = self.fuse(text, ref, visual)
        state = self.dlcg(depth, layout_mean)
        control = self.dlcg.control(state.fused)
        return Conditions(text, ref, visual, tau, state, control, bundles)

    def encode_batch(self, batch: DiffusionBatch) -> Conditions:
        return self.encode(batch.prompts, batch.reference, batch.depth, batch.graphs,
                           batch.token_to_object)

    # -- denoising --------------------------------------------------------------

    def predict_noise(self, z_t, t, tau, fused=None, return_features=False):
        """Denoiser output plus the control branch residuals when ``fused`` is given."""
        control = None if fused is None else self.dlcg.control(fused)
        return self.unet(z_t, t, tau, control, return_features=return_features)

    def losses(self, batch: DiffusionBatch, schedule: NoiseSchedule, lambda1=1.0, lambda2=1.0,
               depth_timestep: int | None = None) -> dict:
        conds = self.encode_batch(batch)
        z_t = add_noise(batch.z0, batch.t, batch.eps, schedule)
        eps_hat = self.unet(z_t, batch.t, conds.tau, conds.control)
        ldm = mse(eps_hat, batch.eps)
        dlc = conds.dlcg.loss
        out = {"ldm": ldm, "dlc": dlc,
               "total": lambda1 * ldm + (lambda2 * dlc if self.cfg.use_dlcg else 0.0 * dlc)}
        if depth_timestep is not None and batch.depth_target is not None:
            out["depth"] = self.depth_loss(batch, conds, schedule, depth_timestep)
        return out

    def depth_features(self, z0, eps, conds: Conditions, schedule, timestep: int):
        t = torch.full((z0.shape[0],), timestep, dtype=torch.long)
        z_t = add_noise(z0, t, eps, schedule)
        _, feats = self.unet(z_t, t, conds.tau, conds.control, return_features=True)
        return feats

    def depth_loss(self, batch, conds, schedule, timestep):
        # the head learns from frozen backbone features
        with torch.no_grad():
            feats = self.depth_features(batch.z0, batch.eps, conds, schedule, timestep)
        return mse(self.depth_head(feats, batch.depth_target.shape[-1]), batch.depth_target)

    def t2i_loss(self, batch: DiffusionBatch, schedule: NoiseSchedule):
        """Text-only objective: no reference, AMA, or control contributions."""
        text = self.text_encoder(batch.prompts)
        z_t = add_noise(batch.z0, batch.t, batch.eps, schedule)
        return mse(self.unet(z_t, batch.t, text), batch.eps)


def build_model(cfg: Config, vocab: Vocabulary, variant: str | None = None, seed: int = 0,
                dtype=torch.float32) -> CamoGen:
    mcfg = cfg.model
    if variant is not None:
        use_dlcg, use_ama = VARIANTS[variant]
        mcfg = ModelConfig(**{**mcfg.__dict__, "use_dlcg": use_dlcg, "use_ama": use_ama})
    torch.manual_seed(seed)
    return CamoGen(mcfg, vocab, cfg.data.image_size).to(dtype)


def make_batch(records, model: CamoGen, schedule: NoiseSchedule, generator: torch.Generator,
               dtype=torch.float32, with_assignment: bool = True) -> DiffusionBatch:
    """Stack corpus records into a training batch with fresh ``t`` and noise."""
    img = np.stack([r.image for r in records]).transpose(0, 3, 1, 2)
    z0 = torch.as_tensor(img * 2 - 1, dtype=dtype)
    b = z0.shape[0]
    t = torch.randint(0, schedule.num_steps, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=torch.float64).to(dtype)
    ref = np.stack([foreground_reference(r.image, r.gt_mask) for r in records]).transpose(0, 3, 1, 2)
    depth = torch.as_tensor(np.stack([r.depth for r in records])[:, None], dtype=dtype)
    assign = None
    if with_assignment:
        assign = [patch_assignment(r.gt_mask, model.cfg.reference_patch, r.graph.num_objects)
                  for r in records]
    return DiffusionBatch(z0, t, eps, [r.caption for r in records], torch.as_tensor(ref, dtype=dtype),
                          depth, [r.graph for r in records], assign, depth)
