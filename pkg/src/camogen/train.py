"""Training loop, checkpoint archive and loss log.

Batches are drawn with an RNG keyed by ``(seed, step)``, so a run resumed from
a checkpoint sees the same batches as an uninterrupted one.
"""

from __future__ import annotations

import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config, config_from_dict
from .datagen import DataError, token_universe
from .diffusion import NoiseSchedule
from .model import CamoGen, build_model, make_batch
from .scene_graph import Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "camogen-checkpoint"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    def __init__(self, step: int, losses: dict):
        self.step = step
        super().__init__(f"non-finite loss at step {step}: {losses}")


@dataclass
class TrainState:
    model: CamoGen
    optimizer: torch.optim.Optimizer
    config: Config
    vocab: Vocabulary
    step: int = 0
    history: list = field(default_factory=list)
    ema: dict | None = None       # exponential moving average of the parameters


def ema_update(ema: dict, model, decay: float, step: int) -> None:
    # short runs: the effective decay ramps up from 0.1
    d = min(decay, (1 + step) / (10 + step))
    with torch.no_grad():
        for name, p in model.named_parameters():
            ema[name].mul_(d).add_(p.detach(), alpha=1 - d)


def use_ema(state: TrainState) -> CamoGen:
    """Copy the averaged weights into the model (for sampling)."""
    if state.ema is not None:
        with torch.no_grad():
            for name, p in state.model.named_parameters():
                p.copy_(state.ema[name])
    state.model.eval()
    return state.model


def vocabulary_for(cfg: Config, records=()) -> Vocabulary:
    vocab = token_universe(cfg)
    for r in records:
        vocab.register_graph(r.graph)
    return vocab


def init_state(cfg: Config, records=(), variant: str | None = None, seed: int | None = None,
               dtype=torch.float32) -> TrainState:
    seed = cfg.train.seed if seed is None else seed
    vocab = vocabulary_for(cfg, records)
    model = build_model(cfg, vocab, variant, seed, dtype)
    if variant is not None:
        cfg = config_from_dict({**cfg.to_dict(), "model": model.cfg.__dict__})
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    return TrainState(model, opt, cfg, vocab)


def batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=min(batch, n), replace=False)


def train(state: TrainState, records, steps: int | None = None, seed: int | None = None,
          callback=None) -> TrainState:
    """Run ``steps`` optimisation steps of ``lambda1*L_LDM + lambda2*L_DLC``.

    The depth head is fitted alongside with its own MSE on detached features.
    """
    cfg = state.config
    tc = cfg.train
    steps = tc.steps if steps is None else steps
    seed = tc.seed if seed is None else seed
    schedule = NoiseSchedule.linear(cfg.diffusion.num_steps)
    model, opt = state.model, state.optimizer
    dtype = next(model.parameters()).dtype
    records = list(records)
    if state.ema is None and tc.ema_decay > 0:
        state.ema = {n: p.detach().clone() for n, p in model.named_parameters()}
    model.train()
    for _ in range(steps):
        step = state.step
        idx = batch_indices(len(records), tc.batch_size, seed, step)
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, step, 1])
                                                .generate_state(1)[0]))
        batch = make_batch([records[i] for i in idx], model, schedule, gen, dtype)
        losses = model.losses(batch, schedule, tc.lambda1, tc.lambda2, tc.depth_timestep)
        row = {"step": step, **{k: float(torch.as_tensor(v).detach()) for k, v in losses.items()}}
        if not all(math.isfinite(v) for k, v in row.items() if k != "step"):
            raise NumericError(step, row)
        opt.zero_grad(set_to_none=True)
        (losses["total"] + losses.get("depth", 0.0)).backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        opt.step()
        if state.ema is not None:
            ema_update(state.ema, model, tc.ema_decay, step)
        state.history.append(row)
        state.step += 1
        if callback is not None:
            callback(row)
    model.eval()
    return state


# -- persistence -------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> Path:
    """Single ``torch.save`` archive: parameters keyed by module path, optimizer
    state, vocabulary, effective config and its hash."""
    path = Path(path)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "vocabulary": state.vocab.to_dict(),
        "step": state.step,
        "state_dict": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "history": state.history,
        "ema": state.ema,
    }, path)
    return path


def load_checkpoint(path) -> TrainState:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a camogen checkpoint")
    cfg = config_from_dict(blob["config"])
    vocab = Vocabulary.from_dict(blob["vocabulary"])
    dtype = next(iter(blob["state_dict"].values())).dtype
    model = build_model(cfg, vocab, dtype=dtype)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    opt.load_state_dict(blob["optimizer"])
    return TrainState(model, opt, cfg, vocab, blob["step"], list(blob.get("history", [])),
                      blob.get("ema"))


def write_loss_csv(history, path, config_hash: str) -> Path:
    path = Path(path)
    lines = [f"# config_hash={config_hash}", "step,L_LDM,L_DLC,L_total,L_depth"]
    for r in history:
        lines.append(f"{r['step']},{r['ldm']:.8g},{r['dlc']:.8g},{r['total']:.8g},"
                     f"{r.get('depth', float('nan')):.8g}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
