# %% [markdown]
# # Train, sample, annotate, evaluate
#
# A deliberately small run (16x16 images, a few dozen steps) so the script
# finishes in about a minute on a laptop CPU. The acceptance suite runs the
# full-size version.

# %%
import numpy as np
import torch

from camogen.config import Config, config_from_dict
from camogen.datagen import generate_sample, sample_seed
from camogen.diffusion import NoiseSchedule
from camogen.evalkit import default_extractor, kid_from_features, mean_metrics
from camogen.generate import generate
from camogen.model import foreground_reference
from camogen.train import init_state, train, use_ema

d = Config().to_dict()
d["data"]["image_size"] = 16
d["model"].update(dim=32, channels=16, heads=2, max_objects=4, prototypes=4)
d["diffusion"].update(num_steps=100, sample_steps=25)
d["train"].update(steps=60, batch_size=8, depth_timestep=25)
cfg = config_from_dict(d)

recs = [generate_sample(sample_seed(0, i), cfg) for i in range(96)]
train_set, held = recs[:64], recs[64:]
state = init_state(cfg, train_set)
train(state, train_set)
print("L_total first/last:", round(state.history[0]["total"], 4), round(state.history[-1]["total"], 4))

# %% [markdown]
# Sample with the averaged weights, conditioned on held-out graphs and depths.

# %%
model = use_ema(state)
sch = NoiseSchedule.linear(cfg.diffusion.num_steps)
ref = torch.tensor(np.stack([foreground_reference(r.image, r.gt_mask) for r in held]).transpose(0, 3, 1, 2),
                   dtype=torch.float32)
dep = torch.tensor(np.stack([r.depth for r in held])[:, None], dtype=torch.float32)
gen = generate(model, sch, [r.caption for r in held], ref, dep, [r.graph for r in held],
               cfg.diffusion.sample_steps, seed=0, annotation_timestep=cfg.train.depth_timestep)
print(gen.images.shape, gen.depths.shape, gen.masks.mean().round(3), "mask coverage")

# %% [markdown]
# Distribution distance against real images versus uniform noise, and the
# coarse attention masks scored against the conditioning masks.

# %%
ex = default_extractor()
f_real = ex(np.stack([r.image for r in recs[:32]]))
noise = np.random.default_rng(0).uniform(size=gen.images.shape)
print("kid-proxy generated:", round(kid_from_features(ex(gen.images), f_real), 4))
print("kid-proxy noise:    ", round(kid_from_features(ex(noise), f_real), 4))
print(mean_metrics(gen.saliency, [r.gt_mask for r in held]))
