# %% [markdown]
# # From a scene graph to conditioning tokens
#
# Walks one graph through embedding, relational reasoning, object fusion,
# the entity mask used by the attribute-aware attention, and the depth-layout
# coherence loss.

# %%
import torch

from camogen.ama import allowed_count, assign_entities, build_attention_mask, masked_attention
from camogen.conditioning import ObjectConditioner
from camogen.dlcg import dlc_loss
from camogen.scene_graph import (EmbeddingTables, ObjectNode, RelationEdge, Vocabulary, build_graph,
                                 embed_graph, to_quintuples)

torch.manual_seed(0)
g = build_graph([ObjectNode(0, "chameleon", "green-scaled"), ObjectNode(1, "branch", "brown-rough")],
                [RelationEdge(0, "lies on", 1)], "a chameleon lies on a branch")
vocab = Vocabulary()
vocab.register_graph(g)
print(to_quintuples(g, vocab))

# %%
tables = EmbeddingTables.for_vocabulary(vocab, dim=16)
node, attr, edge = embed_graph(g, vocab, tables)
cond = ObjectConditioner(16, max_objects=4)
bundle = cond(node, attr, edge, g.incidence)
print("object tokens", tuple(bundle.objects.shape), "(rows past the graph are the null token)")

# %% [markdown]
# Entity mask: six visual tokens, two objects, four object slots. Tokens only
# attend within their entity; padding slots only see themselves.

# %%
emap = assign_entities(2, 6, 4, [0, 0, 1, None, None, 1])
print(emap.entity_ids)
mask = build_attention_mask(emap)
print("allowed entries", int((mask == 0).sum()), "=", allowed_count(emap.entity_ids))
x = torch.randn(emap.length, 16)
out = masked_attention(x, x, x, mask, heads=2)
x2 = x.clone()
x2[0] += 5  # disturb one token of entity 0
moved = (masked_attention(x2, x2, x2, mask, heads=2) - out).abs().sum(1)
print("rows changed:", [i for i, v in enumerate(moved.tolist()) if v > 0])

# %% [markdown]
# The coherence loss is the mean cosine distance from each fused token to its
# nearest prototype: 0 when tokens sit on prototypes (at any scale), 2 when
# every token points away from the only prototype.

# %%
protos = torch.randn(3, 8)
print(dlc_loss(protos[[0, 1, 1, 2]] * 3.0, protos).item())
print(dlc_loss(-protos[:1].repeat(4, 1), protos[:1]).item())
print(dlc_loss(torch.randn(10, 8), protos).item())
