"""``camogen datagen|train|generate|eval|stats``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, config_from_dict, load_config
from .datagen import DataError, _png_bytes, depth_contrast_stats, load_corpus, read_manifest, \
    read_png, scene_graph_stats, write_corpus
from .scene_graph import SceneGraphError, parse_scene_graph

log = logging.getLogger("camogen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _threads():
    raw = os.environ.get("CAMOGEN_NUM_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"must be a positive integer, got {raw!r}", "CAMOGEN_NUM_THREADS") from None
    import torch
    torch.set_num_threads(n)


def _config(path) -> Config:
    return load_config(path) if path else Config()


def _with_seed(cfg: Config, seed) -> Config:
    if seed is None:
        return cfg
    doc = cfg.to_dict()
    doc["train"]["seed"] = seed
    return config_from_dict(doc)


def _read(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------

def cmd_datagen(args) -> int:
    cfg = _config(args.config)
    if args.n < 0:
        raise ConfigError("must be non-negative", "--n")
    path = write_corpus(cfg, args.n, args.out, seed=args.seed or 0)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import init_state, load_checkpoint, save_checkpoint, train, write_loss_csv

    if args.resume:
        state = load_checkpoint(args.resume)
        if args.config and load_config(args.config).hash() != state.config.hash():
            raise ConfigError("config differs from the checkpoint being resumed", "--config")
    else:
        state = None
    records = list(load_corpus(args.corpus, split="train"))
    if not records:
        raise DataError(f"{args.corpus}: no training samples")
    if state is None:
        cfg = _with_seed(_config(args.config), args.seed)
        if args.variant:
            from .model import VARIANTS
            if args.variant not in VARIANTS:
                raise ConfigError(f"unknown variant {args.variant!r}", "--variant")
        state = init_state(cfg, records, variant=args.variant, seed=cfg.train.seed)
    cfg = state.config
    total = cfg.train.steps if args.steps is None else args.steps
    remaining = max(total - state.step, 0)
    train(state, records, steps=remaining, seed=cfg.train.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out)
    write_loss_csv(state.history, out.with_suffix(".csv"), cfg.hash())
    print(out)
    return EXIT_OK


def cmd_generate(args) -> int:
    import torch

    from .annotation import EnvColorError, environment_color_for, recolor_reference
    from .diffusion import NoiseSchedule
    from .generate import generate
    from .train import load_checkpoint, use_ema

    if not args.depth:
        raise DataError("a depth map is required: it conditions the depth-layout branch")
    if not args.graph:
        raise DataError("a scene graph is required")
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    if args.config and load_config(args.config).model != cfg.model:
        raise ConfigError("model section differs from the checkpoint", "model")
    size = cfg.data.image_size
    graph = parse_scene_graph(_read(args.graph).decode("utf-8"))
    depth = read_png(args.depth, "depth")
    if depth.shape != (size, size):
        raise DataError(f"{args.depth}: depth must be {size}x{size}, got {depth.shape}")
    if args.reference:
        ref = read_png(args.reference, "image")
        if ref.shape != (size, size, 3):
            raise DataError(f"{args.reference}: reference must be {size}x{size} RGB")
    else:
        ref = np.zeros((size, size, 3))
    try:
        word, rgb = environment_color_for(graph)
        env = {"word": word, "rgb": list(rgb)}
        ref = recolor_reference(ref, rgb, cfg.annotation.env_color_strength)
    except (EnvColorError, ValueError) as exc:
        log.warning("no environment color: %s", exc)
        env = None
    prompt = args.prompt or graph.caption
    steps = args.steps or cfg.diffusion.sample_steps
    seed = args.seed or 0
    model = use_ema(state)
    dtype = next(model.parameters()).dtype
    gen = generate(model, NoiseSchedule.linear(cfg.diffusion.num_steps), [prompt],
                   torch.as_tensor(ref.transpose(2, 0, 1)[None], dtype=dtype),
                   torch.as_tensor(depth[None, None], dtype=dtype), [graph], steps, seed,
                   cfg.train.depth_timestep, cfg.annotation.mask_threshold)
    if not (np.isfinite(gen.images).all() and np.isfinite(gen.depths).all()):
        from .train import NumericError
        raise NumericError(-1, {"generate": "non-finite output"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    (out / "image.png").write_bytes(_png_bytes(gen.images[0], "image", chash))
    (out / "depth.png").write_bytes(_png_bytes(gen.depths[0], "depth", chash))
    (out / "mask.png").write_bytes(_png_bytes(gen.masks[0], "mask", chash))
    _write_json(out / "generation.json", {
        "config_hash": chash, "checkpoint_step": state.step, "seed": seed, "steps": steps,
        "prompt": prompt, "graph": str(args.graph), "depth": str(args.depth),
        "reference": str(args.reference) if args.reference else None,
        "environment_color": env, "annotation_timestep": cfg.train.depth_timestep,
        "mask_threshold": cfg.annotation.mask_threshold,
    })
    print(out)
    return EXIT_OK


def _png_files(d) -> dict:
    d = Path(d)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    files = {p.name: p for p in sorted(d.glob("*.png"))}
    if not files:
        raise DataError(f"{d}: no PNG files")
    return files


def _load_gray(path) -> np.ndarray:
    from PIL import Image
    try:
        img = Image.open(path)
        a = np.array(img)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if a.ndim == 3:
        a = np.array(img.convert("L"))
    scale = 65535.0 if a.dtype == np.uint16 or a.max() > 255 else 255.0
    return a.astype(np.float64) / scale


def _load_rgb(path) -> np.ndarray:
    from PIL import Image
    try:
        return np.array(Image.open(path).convert("RGB"), dtype=np.float64) / 255
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _files_hash(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode("utf-8"))
        h.update(hashlib.sha256(_read(p)).digest())
    return h.hexdigest()[:16]


def cmd_eval(args) -> int:
    from .evalkit import MetricReport, default_extractor, mean_metrics
    from .evalkit.distances import fid_from_features, kid_from_features, kid_lower_bound

    cfg = _config(args.config)
    meta = {"config_hash": cfg.hash(), "mode": args.mode}
    if args.mode == "seg":
        if not (args.pred and args.gt):
            raise ConfigError("seg mode needs --pred and --gt", "--mode")
        preds, gts = _png_files(args.pred), _png_files(args.gt)
        missing = sorted(set(gts) - set(preds))
        if missing:
            raise DataError(f"{args.pred}: no prediction for {missing[0]}")
        names = sorted(gts)
        pa = [_load_gray(preds[n]) for n in names]
        ga = [_load_gray(gts[n]) > 0.5 for n in names]
        for n, p, g in zip(names, pa, ga):
            if p.shape != g.shape:
                raise DataError(f"{n}: prediction {p.shape} vs ground truth {g.shape}")
        metrics = mean_metrics(pa, ga)
        meta.update(count=len(names), corpus_hash=_files_hash([gts[n] for n in names]),
                    pred_hash=_files_hash([preds[n] for n in names]))
    elif args.mode in ("kid-proxy", "fid-proxy"):
        if not (args.set_a and args.set_b):
            raise ConfigError(f"{args.mode} needs --set-a and --set-b", "--mode")
        fa, fb = _png_files(args.set_a), _png_files(args.set_b)
        if min(len(fa), len(fb)) < 8:
            raise DataError(f"need at least 8 images per set, got {len(fa)} and {len(fb)}")
        try:
            ia = np.stack([_load_rgb(p) for p in fa.values()])
            ib = np.stack([_load_rgb(p) for p in fb.values()])
        except ValueError as exc:
            raise DataError(f"images within a set differ in size: {exc}") from exc
        ex = default_extractor()
        xa, xb = ex(ia), ex(ib)
        if args.mode == "kid-proxy":
            metrics = {"kid_proxy": kid_from_features(xa, xb),
                       "kid_proxy_lower_bound": kid_lower_bound(xa, xb)}
        else:
            metrics = {"fid_proxy": fid_from_features(xa, xb)}
        meta.update(count_a=len(fa), count_b=len(fb), set_a_hash=_files_hash(fa.values()),
                    set_b_hash=_files_hash(fb.values()))
    else:
        raise ConfigError(f"unknown mode {args.mode!r}", "--mode")
    text = MetricReport(metrics, meta).to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_stats(args) -> int:
    manifest_path = args.manifest or args.corpus
    if not manifest_path:
        raise DataError("--manifest is required")
    manifest = read_manifest(manifest_path)
    records = list(load_corpus(manifest_path))
    depth = depth_contrast_stats(records)
    chash = manifest["config_hash"]
    doc = {"config_hash": chash, "num_samples": len(records),
           "depth_contrast": {k: depth[k] for k in ("summary", "bin_edges", "counts")},
           "scene_graph": scene_graph_stats([r.graph for r in records], k=args.top_k)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "stats.json", doc)
    edges = depth["bin_edges"]
    lines = [f"# config_hash={chash}", "bin_lo,bin_hi,count"]
    lines += [f"{edges[i]:.6f},{edges[i + 1]:.6f},{c}" for i, c in enumerate(depth["counts"])]
    (out / "depth_contrast_hist.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(out / "stats.json")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camogen")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON config (defaults when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("datagen", help="render a procedural corpus")
    common(sp, "corpus directory")
    sp.add_argument("--n", type=int, default=640)
    sp.set_defaults(func=cmd_datagen)

    sp = sub.add_parser("train", help="train on a corpus' train split")
    common(sp, "checkpoint path; the loss CSV is written next to it")
    sp.add_argument("--corpus", required=True, help="manifest.json")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--variant", help="base | ama | dlcg | full")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="sample an image with depth and mask")
    common(sp, "output directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--graph")
    sp.add_argument("--depth")
    sp.add_argument("--prompt")
    sp.add_argument("--reference")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("eval", help="segmentation metrics or feature distances")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="report path (stdout only when omitted)")
    sp.add_argument("--mode", default="seg", help="seg | kid-proxy | fid-proxy")
    sp.add_argument("--pred")
    sp.add_argument("--gt")
    sp.add_argument("--set-a")
    sp.add_argument("--set-b")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("stats", help="corpus statistics")
    common(sp, "output directory")
    sp.add_argument("--manifest")
    sp.add_argument("--corpus", help=argparse.SUPPRESS)
    sp.add_argument("--top-k", type=int, default=15)
    sp.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    from .train import NumericError

    try:
        _threads()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SceneGraphError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
