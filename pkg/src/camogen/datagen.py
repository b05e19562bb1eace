"""Procedural camouflage corpus: a textured object over a textured surface,
with paired depth, mask, scene graph and caption, plus corpus statistics.

Every sample is a pure function of ``(seed, DataConfig)``.
"""

from __future__ import annotations

import hashlib
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, PngImagePlugin

from . import palette
from .clients import CaptionClient, ClientError, TemplateCaptionClient, log as _client_log
from .config import Config, DataConfig
from .scene_graph import ObjectNode, RelationEdge, SceneGraph, Vocabulary, build_graph, \
    parse_scene_graph, serialize_scene_graph

OBJECT_CATEGORIES = {"ellipse": "beetle", "triangle": "moth", "blob": "chameleon"}
SURFACE_CATEGORIES = {"flat": ("sand", "rock"), "stripes": ("bark", "reeds"),
                      "noise": ("moss", "leaves")}
TEXTURE_WORDS = {"flat": "smooth", "stripes": "striped", "noise": "mottled"}
PREDICATES = ("lies on", "rests on", "hides in", "clings to", "crawls on")
HIST_BINS = 32
MIN_PAIR_DISTANCE = 0.5


class DataError(RuntimeError):
    pass


class ChecksumError(DataError):
    def __init__(self, path, expected, actual):
        self.path = str(path)
        super().__init__(f"checksum mismatch for {path}: expected {expected}, got {actual}")


@dataclass
class SampleRecord:
    image: np.ndarray      # H x W x 3 in [0, 1], multiples of 1/255
    depth: np.ndarray      # H x W in [0, 1], multiples of 1/65535
    gt_mask: np.ndarray    # H x W uint8 in {0, 1}
    graph: SceneGraph
    caption: str
    seed: int
    camo_level: float
    meta: dict = field(default_factory=dict)

    def equals(self, other: "SampleRecord") -> bool:
        return (np.array_equal(self.image, other.image) and np.array_equal(self.depth, other.depth)
                and np.array_equal(self.gt_mask, other.gt_mask) and self.graph == other.graph
                and self.caption == other.caption and self.seed == other.seed
                and self.camo_level == other.camo_level)


def sample_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


# -- rendering --------------------------------------------------------------

def _grid(size):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)  # x, y


def shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    x, y = _grid(size)
    cx, cy = rng.uniform(0.35, 0.65, 2) * size
    r = rng.uniform(0.18, 0.28) * size
    rot = rng.uniform(0, np.pi)
    dx, dy = x - cx, y - cy
    u = dx * np.cos(rot) + dy * np.sin(rot)
    v = -dx * np.sin(rot) + dy * np.cos(rot)
    if kind == "ellipse":
        aspect = rng.uniform(0.5, 0.9)
        m = (u / r) ** 2 + (v / (r * aspect)) ** 2 <= 1.0
    elif kind == "triangle":
        ang = rot + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, 3)
        px, py = cx + 1.2 * r * np.cos(ang), cy + 1.2 * r * np.sin(ang)
        signs = []
        for k in range(3):
            ax, ay, bx, by = px[k], py[k], px[(k + 1) % 3], py[(k + 1) % 3]
            signs.append((bx - ax) * (y - ay) - (by - ay) * (x - ax))
        s = np.stack(signs)
        m = (s >= 0).all(0) | (s <= 0).all(0)
    elif kind == "blob":
        theta = np.arctan2(dy, dx)
        radius = np.full_like(theta, r)
        for k in (2, 3, 4):
            radius += r * rng.uniform(0.05, 0.18) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        m = np.hypot(dx, dy) <= radius
    else:
        raise DataError(f"unknown shape {kind!r}")
    if not m.any():
        m[int(cy), int(cx)] = True
    return m


def _value_noise(size, rng, octaves=(4, 8)):
    out = np.zeros((size, size))
    weight = 0.0
    for k, cells in enumerate(octaves):
        coarse = rng.uniform(0, 1, (cells + 1, cells + 1))
        pos = np.linspace(0, cells, size, endpoint=False) + 0.5 * cells / size
        i0 = np.floor(pos).astype(int)
        f = pos - i0
        f = f * f * (3 - 2 * f)
        a = coarse[np.ix_(i0, i0)]
        b = coarse[np.ix_(i0, i0 + 1)]
        c = coarse[np.ix_(i0 + 1, i0)]
        d = coarse[np.ix_(i0 + 1, i0 + 1)]
        fy, fx = f[:, None], f[None, :]
        layer = a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + c * (1 - fx) * fy + d * fx * fy
        w = 0.5 ** k
        out += w * layer
        weight += w
    return out / weight


def texture(kind: str, color: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size x size x 3`` texture: brightness modulation of one base color."""
    x, y = _grid(size)
    if kind == "flat":
        mod = np.ones((size, size))
    elif kind == "stripes":
        ang = rng.uniform(0, np.pi)
        period = rng.uniform(4.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        mod = 0.8 + 0.2 * np.sin(2 * np.pi * (x * np.cos(ang) + y * np.sin(ang)) / period + phase)
    elif kind == "noise":
        mod = 0.7 + 0.3 * _value_noise(size, rng)
    else:
        raise DataError(f"unknown texture {kind!r}")
    return np.clip(mod[..., None] * color[None, None, :], 0.0, 1.0)


def generate_sample(seed: int, config: DataConfig | Config, camo_level: float | None = None,
                    captioner: CaptionClient | None = None) -> SampleRecord:
    """Render one sample. ``camo_level`` overrides the sampled level when given."""
    cfg = config.data if isinstance(config, Config) else config
    if not cfg.shapes:
        raise DataError("shape set is empty")
    if not cfg.textures:
        raise DataError("texture set is empty")
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    shape = cfg.shapes[rng.integers(len(cfg.shapes))]
    fg_tex_kind = cfg.textures[rng.integers(len(cfg.textures))]
    bg_tex_kind = cfg.textures[rng.integers(len(cfg.textures))]
    while True:  # contrasting pairs only, so camo_level sets the difficulty
        fg_name, bg_name = rng.choice(palette.COLOR_NAMES, size=2, replace=False)
        if np.linalg.norm(palette.rgb(fg_name) - palette.rgb(bg_name)) >= MIN_PAIR_DISTANCE:
            break
    lo, hi = cfg.camo_level_range
    drawn = float(rng.uniform(lo, hi))
    camo = drawn if camo_level is None else float(camo_level)

    mask = shape_mask(shape, size, rng)
    bg = texture(bg_tex_kind, palette.rgb(bg_name), size, rng)
    fg = texture(fg_tex_kind, palette.rgb(fg_name), size, rng)
    blend = (1.0 - camo) * fg + camo * bg
    image = np.where(mask[..., None], blend, bg)
    image = np.round(image * 255) / 255

    plane = rng.uniform(0.2, 0.5)
    offset = (1.0 - camo) * cfg.max_depth_offset
    depth = np.where(mask, plane + offset, plane)
    depth = np.round(np.clip(depth, 0, 1) * 65535) / 65535

    # the object is described by how it looks, which drifts towards the surface
    seen_color = palette.nearest_color(blend[mask].mean(axis=0))
    seen_texture = fg_tex_kind if camo < 0.5 else bg_tex_kind
    surface = SURFACE_CATEGORIES.get(bg_tex_kind, ("ground",))
    nodes = [
        ObjectNode(0, OBJECT_CATEGORIES.get(shape, shape), f"{seen_color}-{TEXTURE_WORDS.get(seen_texture, seen_texture)}"),
        ObjectNode(1, surface[rng.integers(len(surface))], f"{bg_name}-{TEXTURE_WORDS.get(bg_tex_kind, bg_tex_kind)}"),
    ]
    predicate = PREDICATES[rng.integers(len(PREDICATES))]
    graph = build_graph(nodes, [RelationEdge(0, predicate, 1)])
    caption = caption_sample(graph, captioner)
    graph = SceneGraph(graph.nodes, graph.edges, caption)
    meta = {"shape": shape, "fg_color": str(fg_name), "bg_color": str(bg_name),
            "fg_texture": fg_tex_kind, "bg_texture": bg_tex_kind}
    return SampleRecord(image, depth, mask.astype(np.uint8), graph, caption, int(seed), camo, meta)


def token_universe(config: DataConfig | Config) -> Vocabulary:
    """Every category, attribute and predicate the generator can emit, in a
    fixed order, so vocabularies agree across corpora."""
    cfg = config.data if isinstance(config, Config) else config
    objects = [OBJECT_CATEGORIES.get(s, s) for s in cfg.shapes]
    for t in cfg.textures:
        objects.extend(SURFACE_CATEGORIES.get(t, ("ground",)))
    attributes = [f"{c}-{TEXTURE_WORDS.get(t, t)}" for c in palette.COLOR_NAMES for t in cfg.textures]
    return Vocabulary.from_tokens(dict.fromkeys(objects), attributes, PREDICATES)


def caption_sample(graph: SceneGraph, client: CaptionClient | None = None) -> str:
    template = TemplateCaptionClient()
    if not graph.edges:
        raise ValueError("captioning needs at least one relation edge")
    if client is None:
        return template.caption(graph)
    try:
        return client.caption(graph)
    except (ClientError, OSError, ValueError) as exc:
        _client_log.warning("caption client failed (%s); using the template", exc)
        return template.caption(graph)


# -- corpus I/O --------------------------------------------------------------

KINDS = (("image", "images", "png"), ("depth", "depths", "png"), ("mask", "masks", "png"),
         ("graph", "graphs", "json"))


def _png_bytes(array, kind, chash) -> bytes:
    a = np.asarray(array)
    if kind == "image":
        img = Image.fromarray(np.round(a * 255).astype(np.uint8), mode="RGB")
    elif kind == "depth":
        img = Image.fromarray(np.round(a * 65535).astype(np.uint16))
    else:
        img = Image.fromarray((a > 0).astype(np.uint8) * 255, mode="L")
    info = PngImagePlugin.PngInfo()
    info.add_text("camogen:config_hash", chash)
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


def read_png(path, kind) -> np.ndarray:
    a = np.array(Image.open(path))
    if kind == "image":
        return a[..., :3].astype(np.float64) / 255
    if kind == "depth":
        return a.astype(np.float64) / 65535
    return (a > 0).astype(np.uint8)


def record_files(rec: SampleRecord, chash: str) -> dict[str, bytes]:
    return {
        "image": _png_bytes(rec.image, "image", chash),
        "depth": _png_bytes(rec.depth, "depth", chash),
        "mask": _png_bytes(rec.gt_mask, "mask", chash),
        "graph": (serialize_scene_graph(rec.graph) + "\n").encode("utf-8"),
    }


def split_of(index: int, n: int, splits: dict) -> str:
    n_train = round(splits["train"] * n)
    n_val = round(splits["val"] * n)
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def write_corpus(config: Config, n: int, out_dir, seed: int = 0,
                 captioner: CaptionClient | None = None) -> Path:
    """Write ``n`` samples and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    chash = config.hash()
    try:
        for _, sub, _ in KINDS:
            (out / sub).mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(n):
            s = sample_seed(seed, i)
            rec = generate_sample(s, config.data, captioner=captioner)
            files = {}
            for (kind, sub, ext), data in zip(KINDS, record_files(rec, chash).values()):
                rel = f"{sub}/{i:06d}.{ext}"
                (out / rel).write_bytes(data)
                files[kind] = {"path": rel, "sha256": hashlib.sha256(data).hexdigest()}
            entries.append({"index": i, "seed": s, "camo_level": rec.camo_level,
                            "split": split_of(i, n, config.data.splits), "files": files})
        manifest = {"config_hash": chash, "global_seed": seed, "num_samples": n,
                    "config": config.to_dict(), "samples": entries}
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write corpus under {out}: {exc}") from exc
    return path


def read_manifest(manifest_path) -> dict:
    path = Path(manifest_path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc


def load_corpus(manifest_path, split: str | None = None) -> Iterator[SampleRecord]:
    """Yield records, verifying every file against the manifest checksum."""
    path = Path(manifest_path)
    root = path.parent
    manifest = read_manifest(path)
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        blobs = {}
        for kind, _, _ in KINDS:
            f = root / entry["files"][kind]["path"]
            try:
                data = f.read_bytes()
            except OSError as exc:
                raise DataError(f"cannot read {f}: {exc}") from exc
            digest = hashlib.sha256(data).hexdigest()
            if digest != entry["files"][kind]["sha256"]:
                raise ChecksumError(f, entry["files"][kind]["sha256"], digest)
            blobs[kind] = (f, data)
        graph = parse_scene_graph(blobs["graph"][1].decode("utf-8"))
        yield SampleRecord(read_png(io.BytesIO(blobs["image"][1]), "image"),
                           read_png(io.BytesIO(blobs["depth"][1]), "depth"),
                           read_png(io.BytesIO(blobs["mask"][1]), "mask"),
                           graph, graph.caption, int(entry["seed"]), float(entry["camo_level"]))


# -- statistics --------------------------------------------------------------

def depth_contrast(depth, mask) -> float | None:
    m = np.asarray(mask) > 0
    if not m.any() or m.all():
        return None
    d = np.asarray(depth, dtype=np.float64)
    return float(abs(d[m].mean() - d[~m].mean()))


def depth_contrast_stats(records) -> dict:
    """Histogram (32 bins over [0, 1]) of |mean fg depth - mean bg depth|."""
    values, skipped = [], 0
    for rec in records:
        c = depth_contrast(rec.depth, rec.gt_mask)
        if c is None:
            skipped += 1
        else:
            values.append(c)
    v = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(v, bins=HIST_BINS, range=(0.0, 1.0))
    summary = {"count": int(v.size), "skipped": skipped}
    if v.size:
        summary.update(mean=float(v.mean()), median=float(np.median(v)), std=float(v.std()),
                       min=float(v.min()), max=float(v.max()))
    return {"bin_edges": edges.tolist(), "counts": counts.tolist(), "summary": summary,
            "values": v.tolist()}


def _top(counter: Counter, k: int):
    return [[tok, n] for tok, n in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def scene_graph_stats(graphs, k: int = 15) -> dict:
    """Top-k attribute / object / relation counts and object-attribute pairs.

    Attributes are counted per descriptor word (``"green-mottled"`` counts
    once for ``green`` and once for ``mottled``); full tokens are reported
    under ``attribute_tokens``.
    """
    attrs, tokens, objs, rels, pairs = Counter(), Counter(), Counter(), Counter(), Counter()
    for g in graphs:
        for n in g.nodes:
            tokens[n.attribute] += 1
            objs[n.category] += 1
            for word in dict.fromkeys(n.attribute.split("-")):
                attrs[word] += 1
                pairs[f"{n.category}|{word}"] += 1
        for e in g.edges:
            rels[e.predicate] += 1
    return {"attributes": _top(attrs, k), "attribute_tokens": _top(tokens, k), "objects": _top(objs, k), "relations": _top(rels, k),
            "object_attribute": _top(pairs, k)}
