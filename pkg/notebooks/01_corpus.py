# %% [markdown]
# # The procedural corpus
#
# Each sample is one object on a textured surface. `camo_level` blends the
# object's texture toward the background and flattens its depth step, so a
# single scalar sets how hard the object is to find.

# %%
import numpy as np

from camogen.config import Config
from camogen.datagen import depth_contrast, generate_sample, sample_seed, scene_graph_stats

cfg = Config()
rec = generate_sample(sample_seed(0, 3), cfg)
print(rec.caption)
print([(n.category, n.attribute) for n in rec.graph.nodes], [e.predicate for e in rec.graph.edges])
print(rec.image.shape, rec.depth.shape, rec.gt_mask.sum(), "foreground pixels")

# %% [markdown]
# Same seed, three camouflage levels. The colour gap between object and
# surface and the depth contrast both shrink as the level grows.

# %%
for level in (0.0, 0.5, 1.0):
    r = generate_sample(sample_seed(0, 3), cfg, camo_level=level)
    m = r.gt_mask > 0
    gap = np.linalg.norm(r.image[m].mean(0) - r.image[~m].mean(0))
    print(f"camo {level:.1f}  colour gap {gap:.3f}  depth contrast {depth_contrast(r.depth, r.gt_mask):.3f}")

# %% [markdown]
# Corpus statistics over a few hundred samples.

# %%
recs = [generate_sample(sample_seed(0, i), cfg) for i in range(200)]
contrast = np.array([depth_contrast(r.depth, r.gt_mask) for r in recs])
counts, _ = np.histogram(contrast, bins=8, range=(0, 0.4))
print("depth contrast histogram", counts.tolist())
stats = scene_graph_stats([r.graph for r in recs], k=5)
for table in ("objects", "attributes", "relations"):
    print(table, stats[table])
