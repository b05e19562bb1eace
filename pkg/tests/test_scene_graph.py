import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from camogen.config import Config
from camogen.datagen import generate_sample, sample_seed
from camogen.scene_graph import (EmbeddingTables, ObjectNode, RelationEdge, RelationalReasoning,
                                 SceneGraphError, Vocabulary, build_graph, embed_graph,
                                 graph_from_dict, parse_scene_graph, serialize_scene_graph,
                                 to_quintuples)


def test_chameleon_graph_is_valid(chameleon_graph):
    assert chameleon_graph.num_objects == 2
    assert chameleon_graph.edges[0] == RelationEdge(0, "lies behind", 1)


def test_single_node_graph():
    g = build_graph([ObjectNode(0, "rock", "gray-rough")], [])
    assert g.num_objects == 1 and g.edges == ()


def test_ids_renumbered_in_input_order():
    g = build_graph([ObjectNode(7, "a", "x"), ObjectNode(3, "b", "y")], [RelationEdge(3, "on", 7)])
    assert [n.id for n in g.nodes] == [0, 1]
    assert g.edges[0] == RelationEdge(1, "on", 0)


@pytest.mark.parametrize("nodes,edges,path", [
    ([ObjectNode(0, "a", "x")], [RelationEdge(0, "on", 0)], "edges[0]"),
    ([ObjectNode(0, "a", "x"), ObjectNode(0, "b", "y")], [], "nodes[1].id"),
    ([ObjectNode(0, "a", "x")], [RelationEdge(0, "on", 4)], "edges[0].object_id"),
    ([ObjectNode(0, "a", "x"), ObjectNode(1, "b", "y")],
     [RelationEdge(0, "on", 1), RelationEdge(0, "near", 1)], "edges[1]"),
    ([], [], "nodes"),
])
def test_build_graph_errors(nodes, edges, path):
    with pytest.raises(SceneGraphError) as err:
        build_graph(nodes, edges)
    assert err.value.path == path


def test_quintuple_of_chameleon_graph(chameleon_graph, chameleon_vocab):
    v = chameleon_vocab
    q = to_quintuples(chameleon_graph, v)
    assert q == [(v.index("attributes", "green-scaled"), v.index("objects", "chameleon"),
                  v.index("relations", "lies behind"), v.index("objects", "branch"),
                  v.index("attributes", "brown-rough"))]


def test_no_edges_no_quintuples():
    g = build_graph([ObjectNode(0, "rock", "gray")], [])
    v = Vocabulary()
    v.register_graph(g)
    assert to_quintuples(g, v) == []


@given(st.integers(1, 6))
def test_complete_digraph_quintuple_count(n):
    nodes = [ObjectNode(i, f"o{i}", f"a{i}") for i in range(n)]
    edges = [RelationEdge(i, "near", j) for i in range(n) for j in range(n) if i != j]
    g = build_graph(nodes, edges)
    v = Vocabulary()
    v.register_graph(g)
    assert len(to_quintuples(g, v)) == n * (n - 1) == len(g.edges)


def test_unregistered_token_raises(chameleon_graph):
    with pytest.raises(KeyError):
        to_quintuples(chameleon_graph, Vocabulary())


def test_vocabulary_reserves_pad_index():
    v = Vocabulary.from_tokens(["cat"], ["red"], ["on"])
    assert v.index("objects", "cat") == 1
    with pytest.raises(ValueError):
        v.add("objects", "<pad>")
    with pytest.raises(KeyError):
        v.index("objects", "<pad>")
    assert Vocabulary.from_dict(v.to_dict()) == v


@given(st.lists(st.text(min_size=1, max_size=6).filter(lambda s: s != "<pad>"), max_size=20))
def test_vocabulary_bijective(tokens):
    v = Vocabulary()
    for t in tokens:
        v.add("attributes", t)
    idx = {t: v.index("attributes", t) for t in tokens}
    assert len(set(idx.values())) == len(idx)
    assert 0 not in idx.values()
    assert sorted(idx.values()) == list(range(1, len(idx) + 1))


# -- embeddings -----------------------------------------------------------

def test_zero_tables_give_zero_embeddings():
    g = build_graph([ObjectNode(0, "x", "y")], [])
    v = Vocabulary()
    v.register_graph(g)
    t = EmbeddingTables(2, 2, 1, 4)
    for p in t.parameters():
        torch.nn.init.zeros_(p)
    node, attr, edge = embed_graph(g, v, t)
    assert not node.any() and not attr.any() and edge.shape == (0, 4)


def test_identity_table_lookup_is_one_hot():
    v = Vocabulary.from_tokens(["a", "b", "c"], ["x"], [])
    g = build_graph([ObjectNode(0, "b", "x")], [])
    t = EmbeddingTables(4, 2, 1, 4)
    with torch.no_grad():
        t.objects.weight.copy_(torch.eye(4))
    node, _, _ = embed_graph(g, v, t)
    assert torch.equal(node[0], torch.eye(4)[2])


def test_random_lookup_matches_direct_indexing(chameleon_graph, chameleon_vocab):
    torch.manual_seed(0)
    t = EmbeddingTables.for_vocabulary(chameleon_vocab, 8)
    node, attr, edge = embed_graph(chameleon_graph, chameleon_vocab, t)
    for i, n in enumerate(chameleon_graph.nodes):
        assert torch.equal(node[i], t.objects.weight[chameleon_vocab.index("objects", n.category)])
        assert torch.equal(attr[i], t.attributes.weight[chameleon_vocab.index("attributes", n.attribute)])
    assert torch.equal(edge[0], t.relations.weight[chameleon_vocab.index("relations", "lies behind")])


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_embedding_linear_in_table(alpha, beta, seed):
    v = Vocabulary.from_tokens(["a", "b"], ["x", "y"], ["on"])
    g = build_graph([ObjectNode(0, "b", "x"), ObjectNode(1, "a", "y")], [RelationEdge(0, "on", 1)])
    gen = torch.Generator().manual_seed(seed)
    t1, t2, t3 = (EmbeddingTables(3, 3, 2, 5).double() for _ in range(3))
    with torch.no_grad():
        for p1, p2, p3 in zip(t1.parameters(), t2.parameters(), t3.parameters()):
            p1.copy_(torch.randn(p1.shape, generator=gen, dtype=torch.float64))
            p2.copy_(torch.randn(p2.shape, generator=gen, dtype=torch.float64))
            p3.copy_(alpha * p1 + beta * p2)
    for a, b, c in zip(embed_graph(g, v, t1), embed_graph(g, v, t2), embed_graph(g, v, t3)):
        assert torch.allclose(c, alpha * a + beta * b, atol=1e-12)


# -- relational reasoning -----------------------------------------------------

def test_zero_rounds_is_identity(f64):
    m = RelationalReasoning(6, 2)
    h = torch.randn(3, 6)
    assert torch.equal(m([(0, 1)], h, torch.randn(3, 6), torch.randn(1, 6), rounds=0), h)


def test_isolated_node_uses_self_path_only(f64):
    torch.manual_seed(1)
    m = RelationalReasoning(5, 1)
    h, a, e = torch.randn(3, 5), torch.randn(3, 5), torch.randn(1, 5)
    out = m([(0, 1)], h, a, e)
    expect = F.silu(m.update[0](torch.cat([h[2], torch.zeros(5)])))
    assert torch.allclose(out[2], expect, atol=1e-14)


def test_two_node_message_pass_by_hand(f64):
    torch.manual_seed(2)
    c = 4
    m = RelationalReasoning(c, 1)
    h, a, e = torch.randn(2, c), torch.randn(2, c), torch.randn(1, c)
    W, b = m.message[0].weight.detach().numpy(), m.message[0].bias.detach().numpy()
    U, ub = m.update[0].weight.detach().numpy(), m.update[0].bias.detach().numpy()
    silu = lambda x: x / (1 + np.exp(-x))
    hn, an, en = h.numpy(), a.numpy(), e.numpy()
    msg = silu(W @ np.concatenate([an[0], hn[0], en[0], hn[1], an[1]]) + b)
    # one edge: each endpoint's mean message is that edge's message
    expect = np.stack([silu(U @ np.concatenate([hn[i], msg]) + ub) for i in range(2)])
    out = m([(0, 1)], h, a, e).detach().numpy()
    np.testing.assert_allclose(out, expect, atol=1e-13)


def test_round_bounds():
    m = RelationalReasoning(4, 1)
    with pytest.raises(ValueError):
        m([], torch.randn(1, 4), torch.randn(1, 4), torch.zeros(0, 4), rounds=2)
    with pytest.raises(ValueError):
        RelationalReasoning(4, -1)


# -- documents ------------------------------------------------------------------

def test_round_trip_chameleon(chameleon_graph):
    assert parse_scene_graph(serialize_scene_graph(chameleon_graph)) == chameleon_graph


def test_missing_edge_target_path():
    doc = {"nodes": [{"id": 0, "category": "a", "attribute": "x"}],
           "edges": [{"subject": 0, "predicate": "on", "object": 3}], "caption": ""}
    with pytest.raises(SceneGraphError) as err:
        parse_scene_graph(json.dumps(doc))
    assert err.value.path == "edges[0].object_id"


@pytest.mark.parametrize("doc,path", [
    ({"nodes": [], "edges": []}, "caption"),
    ({"nodes": [{"id": "0", "category": "a", "attribute": "x"}], "edges": [], "caption": ""}, "nodes[0].id"),
    ({"nodes": [{"id": 0, "category": "a"}], "edges": [], "caption": ""}, "nodes[0].attribute"),
])
def test_schema_violations_name_the_field(doc, path):
    with pytest.raises(SceneGraphError) as err:
        graph_from_dict(doc)
    assert err.value.path == path


def test_malformed_json():
    with pytest.raises(SceneGraphError):
        parse_scene_graph("{nodes: ")


def test_unknown_top_level_key():
    with pytest.raises(SceneGraphError):
        graph_from_dict({"nodes": [], "edges": [], "caption": "", "extra": 1})


def test_generated_corpus_graphs_round_trip():
    cfg = Config()
    graphs = [generate_sample(sample_seed(3, i), cfg.data).graph for i in range(100)]
    assert sum(parse_scene_graph(serialize_scene_graph(g)) == g for g in graphs) == 100


names = st.text(st.characters(min_codepoint=32, max_codepoint=0x2FF), min_size=1, max_size=8)


@st.composite
def graphs(draw):
    n = draw(st.integers(1, 5))
    nodes = [ObjectNode(i, draw(names), draw(names)) for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    edges = [RelationEdge(i, draw(names), j) for i, j in chosen]
    return build_graph(nodes, edges, draw(names))


@given(graphs())
@settings(max_examples=60, deadline=None)
def test_round_trip_property(g):
    assert parse_scene_graph(serialize_scene_graph(g)) == g
