"""Camouflage scene graphs: nodes with one attribute each, directed relation
edges, quintuple extraction, embedding tables and relational reasoning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD_TOKEN = "<pad>"


class SceneGraphError(ValueError):
    """Invalid scene graph or document. ``path`` names the offending field."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class ObjectNode:
    id: int
    category: str
    attribute: str


@dataclass(frozen=True)
class RelationEdge:
    subject_id: int
    predicate: str
    object_id: int


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[ObjectNode, ...]
    edges: tuple[RelationEdge, ...]
    caption: str = ""

    @property
    def num_objects(self) -> int:
        return len(self.nodes)

    @property
    def incidence(self) -> list[tuple[int, int]]:
        return [(e.subject_id, e.object_id) for e in self.edges]

    def tokens(self) -> set[str]:
        out = set()
        for n in self.nodes:
            out.update((n.category, n.attribute))
        out.update(e.predicate for e in self.edges)
        return out


class Quintuple(NamedTuple):
    subject_attribute: int
    subject: int
    predicate: int
    object: int
    object_attribute: int


def build_graph(nodes: Iterable[ObjectNode], edges: Iterable[RelationEdge],
                caption: str = "") -> SceneGraph:
    """Validate nodes/edges and renumber node ids to ``0..N_o-1`` in input order."""
    nodes = list(nodes)
    edges = list(edges)
    if not nodes:
        raise SceneGraphError("a scene graph needs at least one node", "nodes")
    remap: dict[int, int] = {}
    for k, n in enumerate(nodes):
        if n.id in remap:
            raise SceneGraphError(f"duplicate node id {n.id}", f"nodes[{k}].id")
        remap[n.id] = k
    renumbered = tuple(ObjectNode(k, n.category, n.attribute) for k, n in enumerate(nodes))

    seen = set()
    new_edges = []
    for k, e in enumerate(edges):
        if e.subject_id not in remap:
            raise SceneGraphError(f"unknown node id {e.subject_id}", f"edges[{k}].subject_id")
        if e.object_id not in remap:
            raise SceneGraphError(f"unknown node id {e.object_id}", f"edges[{k}].object_id")
        if e.subject_id == e.object_id:
            raise SceneGraphError("self-loop edge", f"edges[{k}]")
        pair = (remap[e.subject_id], remap[e.object_id])
        if pair in seen:
            raise SceneGraphError(f"second edge for ordered pair {pair}", f"edges[{k}]")
        seen.add(pair)
        new_edges.append(RelationEdge(pair[0], e.predicate, pair[1]))
    return SceneGraph(renumbered, tuple(new_edges), caption)


@dataclass
class Vocabulary:
    """Three token->index maps. Index 0 is reserved for padding / unknown."""

    objects: dict[str, int] = field(default_factory=lambda: {PAD_TOKEN: 0})
    attributes: dict[str, int] = field(default_factory=lambda: {PAD_TOKEN: 0})
    relations: dict[str, int] = field(default_factory=lambda: {PAD_TOKEN: 0})

    KINDS = ("objects", "attributes", "relations")

    def _table(self, kind: str) -> dict[str, int]:
        if kind not in self.KINDS:
            raise KeyError(kind)
        return getattr(self, kind)

    def add(self, kind: str, token: str) -> int:
        table = self._table(kind)
        if token == PAD_TOKEN:
            raise ValueError(f"{PAD_TOKEN!r} is reserved")
        if token not in table:
            table[token] = len(table)
        return table[token]

    def index(self, kind: str, token: str) -> int:
        table = self._table(kind)
        if token == PAD_TOKEN or token not in table:
            raise KeyError(f"token {token!r} not registered in {kind}")
        return table[token]

    def size(self, kind: str) -> int:
        return len(self._table(kind))

    def register_graph(self, g: SceneGraph) -> None:
        for n in g.nodes:
            self.add("objects", n.category)
            self.add("attributes", n.attribute)
        for e in g.edges:
            self.add("relations", e.predicate)

    @classmethod
    def from_tokens(cls, objects=(), attributes=(), relations=()) -> "Vocabulary":
        v = cls()
        for kind, toks in zip(cls.KINDS, (objects, attributes, relations)):
            for tok in toks:
                v.add(kind, tok)
        return v

    def to_dict(self) -> dict:
        # insertion order is index order, so lists are enough
        return {k: sorted(self._table(k), key=self._table(k).get) for k in self.KINDS}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        v = cls()
        for kind in cls.KINDS:
            toks = d[kind]
            if not toks or toks[0] != PAD_TOKEN:
                raise ValueError(f"vocabulary table {kind} must start with {PAD_TOKEN!r}")
            for tok in toks[1:]:
                v.add(kind, tok)
        return v


def to_quintuples(g: SceneGraph, vocab: Vocabulary) -> list[Quintuple]:
    """One ``(a_i, o_i, e_ij, o_j, a_j)`` index tuple per edge, in edge order."""
    out = []
    for e in g.edges:
        s, o = g.nodes[e.subject_id], g.nodes[e.object_id]
        out.append(Quintuple(
            vocab.index("attributes", s.attribute),
            vocab.index("objects", s.category),
            vocab.index("relations", e.predicate),
            vocab.index("objects", o.category),
            vocab.index("attributes", o.attribute),
        ))
    return out


class EmbeddingTables(nn.Module):
    """Learnable object / attribute / relation embeddings sharing width C."""

    def __init__(self, n_objects: int, n_attributes: int, n_relations: int, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.objects = nn.Embedding(n_objects, dim)
        self.attributes = nn.Embedding(n_attributes, dim)
        self.relations = nn.Embedding(n_relations, dim)

    @classmethod
    def for_vocabulary(cls, vocab: Vocabulary, dim: int = 64) -> "EmbeddingTables":
        return cls(vocab.size("objects"), vocab.size("attributes"), vocab.size("relations"), dim)


def _lookup(table: nn.Embedding, idx: list[int], what: str) -> torch.Tensor:
    n = table.num_embeddings
    for i in idx:
        if not 0 <= i < n:
            raise KeyError(f"{what} index {i} outside table of {n} rows")
    ids = torch.tensor(idx, dtype=torch.long, device=table.weight.device)
    return table.weight.index_select(0, ids)


def embed_graph(g: SceneGraph, vocab: Vocabulary, tables: EmbeddingTables):
    """Return ``(node_emb, attr_emb, edge_emb)`` rows looked up from ``tables``."""
    node_idx = [vocab.index("objects", n.category) for n in g.nodes]
    attr_idx = [vocab.index("attributes", n.attribute) for n in g.nodes]
    edge_idx = [vocab.index("relations", e.predicate) for e in g.edges]
    node_emb = _lookup(tables.objects, node_idx, "object")
    attr_emb = _lookup(tables.attributes, attr_idx, "attribute")
    if edge_idx:
        edge_emb = _lookup(tables.relations, edge_idx, "relation")
    else:
        edge_emb = tables.relations.weight.new_zeros((0, tables.dim))
    return node_emb, attr_emb, edge_emb


class RelationalReasoning(nn.Module):
    """Mean-aggregation message passing over quintuples.

    A quintuple ``(a_i, o_i, e_ij, o_j, a_j)`` produces the message
    ``silu(W_msg [a_i; h_i; e_ij; h_j; a_j])`` which is delivered to both
    endpoints. Node ``i`` is then updated as ``silu(W_upd [h_i; mean_msg_i])``.
    Isolated nodes receive a zero message mean.
    """

    def __init__(self, dim: int = 64, rounds: int = 2):
        super().__init__()
        if rounds < 0:
            raise ValueError("rounds must be >= 0")
        self.rounds = rounds
        self.message = nn.ModuleList(nn.Linear(5 * dim, dim) for _ in range(rounds))
        self.update = nn.ModuleList(nn.Linear(2 * dim, dim) for _ in range(rounds))

    def forward(self, incidence, node_emb, attr_emb, edge_emb, rounds: int | None = None):
        rounds = self.rounds if rounds is None else rounds
        if rounds < 0 or rounds > self.rounds:
            raise ValueError(f"rounds must be in [0, {self.rounds}]")
        h = node_emb
        n = h.shape[0]
        if rounds == 0:
            return h
        if len(incidence):
            src = torch.tensor([i for i, _ in incidence], dtype=torch.long, device=h.device)
            dst = torch.tensor([j for _, j in incidence], dtype=torch.long, device=h.device)
        for r in range(rounds):
            agg = h.new_zeros(h.shape)
            if len(incidence):
                quint = torch.cat([attr_emb[src], h[src], edge_emb, h[dst], attr_emb[dst]], dim=1)
                msg = F.silu(self.message[r](quint))
                agg = agg.index_add(0, src, msg).index_add(0, dst, msg)
                deg = torch.bincount(torch.cat([src, dst]), minlength=n).clamp(min=1).to(h.dtype)
                agg = agg / deg[:, None]
            h = F.silu(self.update[r](torch.cat([h, agg], dim=1)))
        return h


def relational_reasoning(quintuple_incidence, node_emb, attr_emb, edge_emb, module: RelationalReasoning,
                         rounds: int | None = None):
    return module(quintuple_incidence, node_emb, attr_emb, edge_emb, rounds)


# -- JSON documents ---------------------------------------------------------

def graph_to_dict(g: SceneGraph) -> dict:
    return {
        "nodes": [{"id": n.id, "category": n.category, "attribute": n.attribute} for n in g.nodes],
        "edges": [{"subject": e.subject_id, "predicate": e.predicate, "object": e.object_id}
                  for e in g.edges],
        "caption": g.caption,
    }


def serialize_scene_graph(g: SceneGraph) -> str:
    return json.dumps(graph_to_dict(g), ensure_ascii=False, indent=2)


def _require(d, key, typ, path):
    if not isinstance(d, dict) or key not in d:
        raise SceneGraphError("missing field", f"{path}.{key}" if path else key)
    val = d[key]
    if typ is int and isinstance(val, bool) or not isinstance(val, typ):
        raise SceneGraphError(f"expected {typ.__name__}", f"{path}.{key}" if path else key)
    return val


def graph_from_dict(doc: dict) -> SceneGraph:
    if not isinstance(doc, dict):
        raise SceneGraphError("document must be an object")
    unknown = set(doc) - {"nodes", "edges", "caption"}
    if unknown:
        raise SceneGraphError(f"unknown keys {sorted(unknown)}")
    raw_nodes = _require(doc, "nodes", list, "")
    raw_edges = _require(doc, "edges", list, "")
    caption = _require(doc, "caption", str, "")
    nodes = []
    for k, rn in enumerate(raw_nodes):
        p = f"nodes[{k}]"
        nodes.append(ObjectNode(_require(rn, "id", int, p), _require(rn, "category", str, p),
                                _require(rn, "attribute", str, p)))
    ids = [n.id for n in nodes]
    for k, n in enumerate(nodes):
        if n.id in ids[:k]:
            raise SceneGraphError(f"duplicate node id {n.id}", f"nodes[{k}].id")
    edges = []
    for k, re_ in enumerate(raw_edges):
        p = f"edges[{k}]"
        s = _require(re_, "subject", int, p)
        pred = _require(re_, "predicate", str, p)
        o = _require(re_, "object", int, p)
        if s not in ids:
            raise SceneGraphError(f"unknown node id {s}", f"{p}.subject_id")
        if o not in ids:
            raise SceneGraphError(f"unknown node id {o}", f"{p}.object_id")
        edges.append(RelationEdge(s, pred, o))
    return build_graph(nodes, edges, caption)


def parse_scene_graph(text: str) -> SceneGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneGraphError(f"malformed JSON: {exc}") from exc
    return graph_from_dict(doc)
