"""External annotator clients: caption and refiner protocols, bundled mocks,
and a small HTTP reference binding (``POST /caption``, ``POST /refine``)."""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Protocol

import numpy as np
from PIL import Image
from scipy import ndimage

from .scene_graph import SceneGraph, graph_from_dict, graph_to_dict

log = logging.getLogger(__name__)


class ClientError(RuntimeError):
    pass


# -- PNG payloads -----------------------------------------------------------

def encode_png(array: np.ndarray, kind: str) -> bytes:
    """``depth``: 16-bit grayscale; ``mask``: 8-bit {0,255}; ``image``: 8-bit RGB."""
    a = np.asarray(array)
    if kind == "depth":
        img = Image.fromarray(np.round(np.clip(a, 0, 1) * 65535).astype(np.uint16))
    elif kind == "mask":
        img = Image.fromarray((a > 0).astype(np.uint8) * 255, mode="L")
    elif kind == "image":
        img = Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8), mode="RGB")
    else:
        raise ValueError(f"unknown payload kind {kind!r}")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes, kind: str) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    a = np.array(img)
    if kind == "depth":
        return a.astype(np.float64) / 65535.0
    if kind == "mask":
        return (a > 0).astype(np.uint8)
    if kind == "image":
        return a[..., :3].astype(np.float64) / 255.0
    raise ValueError(f"unknown payload kind {kind!r}")


def to_b64(array, kind) -> str:
    return base64.b64encode(encode_png(array, kind)).decode("ascii")


def from_b64(text, kind) -> np.ndarray:
    return decode_png(base64.b64decode(text), kind)


# -- captions ---------------------------------------------------------------

CONCEALMENT_CLAUSE = "blending with its surroundings"

CAPTION_PROMPT = (
    "Describe the image in one concise sentence. Use a subject-verb-object structure to state "
    "what the animal is doing. Modify both the subject and object with color, texture, and "
    "appearance descriptors. Include concealment cues describing how the animal blends with "
    "its surroundings. Add environment cues that specify the background materials or habitats. "
    "Explicitly mention spatial or contact relations (e.g., lies on, hides in, blends with)."
)


class CaptionClient(Protocol):
    def caption(self, graph: SceneGraph) -> str: ...


class TemplateCaptionClient:
    """``<attr_i> <obj_i> <predicate> <attr_j> <obj_j>`` per edge plus a concealment clause."""

    def caption(self, graph: SceneGraph) -> str:
        if not graph.edges:
            raise ValueError("captioning needs at least one relation edge")
        clauses = []
        for e in graph.edges:
            s, o = graph.nodes[e.subject_id], graph.nodes[e.object_id]
            clauses.append(f"{s.attribute} {s.category} {e.predicate} {o.attribute} {o.category}")
        return " and ".join(clauses) + ", " + CONCEALMENT_CLAUSE


def _post_json(url: str, payload: dict, timeout: float) -> dict:
    req = urllib.request.Request(url, data=json.dumps(payload).encode("utf-8"),
                                 headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise ClientError(f"{url}: {exc}") from exc


class HttpCaptionClient:
    def __init__(self, base_url: str, timeout: float = 5.0):
        self.url = base_url.rstrip("/") + "/caption"
        self.timeout = timeout

    def caption(self, graph: SceneGraph) -> str:
        body = _post_json(self.url, {"graph": graph_to_dict(graph), "prompt": CAPTION_PROMPT},
                          self.timeout)
        if not isinstance(body.get("caption"), str):
            raise ClientError(f"{self.url}: response has no caption string")
        return body["caption"]


# -- refiners ---------------------------------------------------------------

class RefinerClient(Protocol):
    def refine(self, array: np.ndarray, kind: str) -> np.ndarray: ...


class IdentityRefiner:
    def refine(self, array, kind):
        return np.array(array, copy=True)


def median_root(depth: np.ndarray, size: int = 3, max_iter: int = 100) -> np.ndarray:
    """Repeat a median filter until it reaches a fixed point (a root signal)."""
    cur = np.asarray(depth, dtype=np.float64)
    for _ in range(max_iter):
        nxt = ndimage.median_filter(cur, size=size, mode="nearest")
        if np.array_equal(nxt, cur):
            return cur
        cur = nxt
    log.warning("median smoothing did not settle after %d passes", max_iter)
    return cur


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected foreground component (lowest label on ties)."""
    m = np.asarray(mask) > 0
    labels, n = ndimage.label(m)
    if n <= 1:
        return m.astype(np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


class MockRefiner:
    """Stand-in for the depth / mask refiners: median smoothing and largest component."""

    def refine(self, array, kind):
        if kind == "depth":
            return median_root(array)
        if kind == "mask":
            return largest_component(array)
        raise ValueError(f"unknown refine kind {kind!r}")


class HttpRefinerClient:
    def __init__(self, base_url: str, timeout: float = 5.0):
        self.url = base_url.rstrip("/") + "/refine"
        self.timeout = timeout

    def refine(self, array, kind):
        body = _post_json(self.url, {"image": to_b64(array, kind), "kind": kind}, self.timeout)
        try:
            out = from_b64(body["image"], kind)
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ClientError(f"{self.url}: bad refine response: {exc}") from exc
        if out.shape != np.asarray(array).shape:
            raise ClientError(f"{self.url}: shape {out.shape} != request {np.asarray(array).shape}")
        return out


# -- reference server -------------------------------------------------------

def make_server(refiner: RefinerClient | None = None, captioner: CaptionClient | None = None,
                host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP server exposing the given in-process clients; call ``serve_forever``."""
    refiner = refiner or MockRefiner()
    captioner = captioner or TemplateCaptionClient()

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _reply(self, code, payload):
            data = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length", 0))
                req = json.loads(self.rfile.read(length).decode("utf-8"))
                if self.path == "/refine":
                    kind = req["kind"]
                    out = refiner.refine(from_b64(req["image"], kind), kind)
                    self._reply(200, {"image": to_b64(out, kind)})
                elif self.path == "/caption":
                    self._reply(200, {"caption": captioner.caption(graph_from_dict(req["graph"]))})
                else:
                    self._reply(404, {"error": f"no route {self.path}"})
            except Exception as exc:  # report, never kill the server thread
                self._reply(400, {"error": str(exc)})

    return ThreadingHTTPServer((host, port), Handler)


def serve_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    th = threading.Thread(target=server.serve_forever, daemon=True)
    th.start()
    return th
