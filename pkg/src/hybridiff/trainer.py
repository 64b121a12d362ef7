"""Optimizer, training loop and the staged schedule: pretraining, quality tuning
with eval-score early stopping, and resolution adaptation."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .backbone import HybridDiffusionModel, build_model, interpolate_pe, sincos_2d
from .checkpoint import Checkpoint, load_model_state, save_checkpoint
from .conditioning import TextEncoder, build_text_encoder
from .datagen import Manifest, SceneSpec, render
from .diffusion import P_UNCOND, NoiseSchedule, make_schedule, training_loss
from .imageio import to_latent
from .ssm import set_compiled_scan

log = logging.getLogger(__name__)

STAGES = ("pretrain", "quality_tune", "res_adapt")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    lr: float = 1e-3  # full-size runs use 2e-5
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 32
    max_steps: int = 1000
    ckpt_interval: int = 0  # 0: only the final checkpoint
    eval_interval: int = 100
    patience: int = 2
    new_resolution: int = 0
    p_uncond: float = P_UNCOND
    seed: int = 0
    compile_scan: bool = False  # torch.compile the SSM scan for long fixed-shape runs

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")
        if self.ckpt_interval < 0 or (self.ckpt_interval and self.max_steps and self.ckpt_interval > self.max_steps):
            raise ValueError("checkpoint interval must lie in [0, max_steps]")


# -- optimizer -------------------------------------------------------------------

@dataclass
class OptimState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def optimizer_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
                   state: OptimState, config: TrainConfig) -> OptimState:
    """Adaptive-moment update with bias correction and decoupled weight decay.

    Updates ``params`` in place; a non-finite gradient aborts before any write.
    """
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    b1, b2 = config.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if config.weight_decay:
                p.mul_(1 - config.lr * config.weight_decay)
            p.sub_(config.lr * (m / c1) / ((v / c2).sqrt() + config.eps))
    return state


# -- data ------------------------------------------------------------------------

@dataclass
class TrainingSet:
    latents: torch.Tensor  # (n, C, S, S) in [-1, 1]
    text: torch.Tensor  # (n, T, d_text)
    mask: torch.Tensor  # (n, T)

    def __len__(self) -> int:
        return self.latents.shape[0]

    @property
    def side(self) -> int:
        return self.latents.shape[-1]


def prepare_dataset(scenes: list[SceneSpec], captions: list[str], encoder: TextEncoder, side: int = 16) -> TrainingSet:
    if not scenes:
        raise ValueError("empty corpus")
    latents = to_latent(np.stack([render(s, side) for s in scenes]))
    text, mask = encoder.encode(captions)
    return TrainingSet(latents, text, mask)


def dataset_from_manifest(manifest: Manifest, encoder: TextEncoder, side: int | None = None,
                          subset: str = "records") -> TrainingSet:
    return prepare_dataset(manifest.scenes(subset), manifest.captions(subset), encoder, side or manifest.side)


def step_generator(seed: int, step: int) -> torch.Generator:
    """Randomness for one step depends only on (seed, step), so resumed runs
    replay the uninterrupted trajectory."""
    state = np.random.SeedSequence([seed, step]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    history: list[dict] = field(default_factory=list)


def make_checkpoint(model: HybridDiffusionModel, optim: OptimState | None, meta: dict,
                    encoder: TextEncoder | None = None) -> Checkpoint:
    tensors = {f"model.{k}": v.detach().clone() for k, v in model.state_dict().items()}
    if optim is not None:
        tensors.update({f"optim.m.{k}": v.clone() for k, v in optim.m.items()})
        tensors.update({f"optim.v.{k}": v.clone() for k, v in optim.v.items()})
    if encoder is not None:
        tensors.update({f"text_encoder.{k}": v.clone() for k, v in encoder.state_dict().items()})
    meta = {"optim_step": optim.step if optim else 0, **meta}
    return Checkpoint(tensors, model.config, meta)


def _with_encoder(ckpt: Checkpoint, source: Checkpoint) -> Checkpoint:
    """Carry the frozen text encoder of ``source`` into a later-stage checkpoint."""
    ckpt.tensors.update({k: v for k, v in source.tensors.items() if k.startswith("text_encoder.")})
    return ckpt


def load_encoder(ckpt: Checkpoint, seed: int = 0) -> TextEncoder:
    """The text encoder stored in ``ckpt``, or a fresh one seeded by ``seed``."""
    cfg = ckpt.config
    encoder = build_text_encoder(cfg.d_text, seed=seed, max_tokens=cfg.max_text_tokens)
    state = ckpt.group("text_encoder")
    if state:
        encoder.load_state_dict(state)
    return encoder


def restore(ckpt: Checkpoint, dtype: torch.dtype = torch.float32):
    """Rebuild ``(model, optimizer state)`` from a checkpoint."""
    model = build_model(ckpt.config, dtype=dtype)
    load_model_state(model, ckpt)
    optim = OptimState(step=int(ckpt.meta.get("optim_step", 0)), m=ckpt.group("optim.m"), v=ckpt.group("optim.v"))
    return model, optim


class LossLog:
    """CSV with columns step, loss, lr, wall_ms."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._t0 = time.perf_counter()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists()
            self._f = open(self.path, "a", newline="")
            self._w = csv.writer(self._f)
            if new:
                self._w.writerow(["step", "loss", "lr", "wall_ms"])

    def write(self, step: int, loss: float, lr: float) -> None:
        if self.path is not None:
            self._w.writerow([step, f"{loss:.8g}", lr, round(1000 * (time.perf_counter() - self._t0), 3)])

    def close(self) -> None:
        if self.path is not None:
            self._f.close()


def train_steps(model: HybridDiffusionModel, data: TrainingSet, config: TrainConfig, optim: OptimState,
                start_step: int, n_steps: int, schedule: NoiseSchedule, *, loss_log: LossLog | None = None,
                on_step: Callable[[int, float], None] | None = None) -> list[float]:
    params = dict(model.named_parameters())
    dtype = next(model.parameters()).dtype
    losses = []
    model.train()
    set_compiled_scan(config.compile_scan)
    try:
        for step in range(start_step, start_step + n_steps):
            g = step_generator(config.seed, step)
            idx = torch.randint(len(data), (config.batch_size,), generator=g)
            loss = training_loss(model, data.latents[idx].to(dtype), data.text[idx].to(dtype), data.mask[idx], g,
                                 schedule, config.p_uncond)
            model.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer_step(params, {k: p.grad for k, p in params.items()}, optim, config)
            value = float(loss.detach())
            losses.append(value)
            if loss_log is not None:
                loss_log.write(step + 1, value, config.lr)
            if on_step is not None:
                on_step(step + 1, value)
    finally:
        set_compiled_scan(False)
    return losses


def pretrain(model: HybridDiffusionModel, data: TrainingSet, config: TrainConfig, *, run_dir=None,
             resume: Checkpoint | None = None, encoder: TextEncoder | None = None,
             schedule: NoiseSchedule | None = None) -> TrainResult:
    """Train for ``config.max_steps`` total steps, resuming from ``resume`` if given.

    With a run directory, writes ``train_log.csv`` and
    ``checkpoints/step_XXXXXX.ckpt`` every ``ckpt_interval`` steps.
    """
    if len(data) == 0:
        raise ValueError("empty corpus")
    schedule = schedule or make_schedule(model.config.num_timesteps)
    optim = OptimState()
    start = 0
    if resume is not None:
        load_model_state(model, resume)
        optim = OptimState(step=int(resume.meta.get("optim_step", 0)), m=resume.group("optim.m"),
                           v=resume.group("optim.v"))
        start = int(resume.meta["step"])
    run_dir = Path(run_dir) if run_dir else None
    loss_log = LossLog(run_dir / "train_log.csv" if run_dir else None)

    def meta(step):
        return {"step": step, "stage": config.stage, "seed": config.seed}

    def on_step(step, _loss):
        if run_dir and config.ckpt_interval and step % config.ckpt_interval == 0:
            save_checkpoint(run_dir / "checkpoints" / f"step_{step:06d}.ckpt",
                            make_checkpoint(model, optim, meta(step), encoder))

    try:
        losses = train_steps(model, data, config, optim, start, max(0, config.max_steps - start), schedule,
                             loss_log=loss_log, on_step=on_step)
    finally:
        loss_log.close()
    ckpt = make_checkpoint(model, optim, meta(max(start, config.max_steps)), encoder)
    if run_dir:
        save_checkpoint(run_dir / "checkpoints" / "last.ckpt", ckpt)
    return TrainResult(ckpt, losses)


def quality_tune(ckpt: Checkpoint, data: TrainingSet, config: TrainConfig,
                 evaluator: Callable[[HybridDiffusionModel], float], *, run_dir=None,
                 schedule: NoiseSchedule | None = None) -> TrainResult:
    """Fine-tune on a filtered subset and keep the checkpoint with the best eval score.

    Scores are taken every ``eval_interval`` steps. Training stops once
    ``patience`` consecutive evaluations fail to improve on the best, so
    ``patience=0`` returns the first evaluated checkpoint. Selection ignores
    the training loss.
    """
    if len(data) == 0:
        raise ValueError("empty quality corpus")
    model, _ = restore(ckpt)
    schedule = schedule or make_schedule(model.config.num_timesteps)
    optim = OptimState()  # fresh moments for the new stage
    config = replace(config, stage="quality_tune")
    start = int(ckpt.meta.get("step", 0))
    loss_log = LossLog(Path(run_dir) / "quality_log.csv" if run_dir else None)
    best: Checkpoint | None = None
    best_score = -float("inf")
    since_best = 0
    history, losses = [], []
    step = start
    try:
        while step - start < config.max_steps:
            n = min(config.eval_interval, config.max_steps - (step - start))
            losses += train_steps(model, data, config, optim, step, n, schedule, loss_log=loss_log)
            step += n
            model.eval()
            score = float(evaluator(model))
            history.append({"step": step, "score": score, "loss": losses[-1]})
            log.info("quality_tune step %d score %.4f loss %.4f", step, score, losses[-1])
            if score > best_score:
                best_score, since_best = score, 0
                best = _with_encoder(make_checkpoint(model, None, {"step": step, "stage": "quality_tune",
                                                                   "seed": config.seed, "eval_score": score}), ckpt)
            else:
                since_best += 1
            if since_best >= config.patience:
                break
    finally:
        loss_log.close()
    if best is None:
        best = _with_encoder(make_checkpoint(model, None, {"step": step, "stage": "quality_tune",
                                                           "seed": config.seed}), ckpt)
    if run_dir:
        save_checkpoint(Path(run_dir) / "checkpoints" / "quality_best.ckpt", best)
    return TrainResult(best, losses, history)


def resize_model(ckpt: Checkpoint, new_side: int, use_pe_interp: bool = True,
                 dtype: torch.dtype = torch.float32) -> HybridDiffusionModel:
    """Copy every weight into a model at ``new_side`` pixels; only the
    positional embedding changes (interpolated, or freshly initialised)."""
    old = ckpt.config
    if new_side <= old.resolution:
        raise ValueError(f"new resolution {new_side} must exceed {old.resolution}")
    if new_side % old.patch:
        raise ValueError(f"patch {old.patch} does not divide {new_side}")
    cfg = old.replace(resolution=new_side)
    model = build_model(cfg, seed=int(ckpt.meta.get("seed", 0)), dtype=dtype)
    load_model_state(model, ckpt, skip=("pos_embed",))
    with torch.no_grad():
        if use_pe_interp:
            model.pos_embed.copy_(interpolate_pe(ckpt.model_state()["pos_embed"], cfg.grid))
        else:
            model.pos_embed.copy_(sincos_2d(cfg.grid, cfg.hidden))
    return model


def adapt_resolution(ckpt: Checkpoint, new_side: int, config: TrainConfig, data: TrainingSet,
                     use_pe_interp: bool = True, *, run_dir=None, schedule: NoiseSchedule | None = None,
                     on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    if data.side != new_side:
        raise ValueError(f"training images are {data.side}px, expected {new_side}px")
    model = resize_model(ckpt, new_side, use_pe_interp)
    schedule = schedule or make_schedule(model.config.num_timesteps)
    config = replace(config, stage="res_adapt")
    optim = OptimState()
    loss_log = LossLog(Path(run_dir) / "resadapt_log.csv" if run_dir else None)
    try:
        losses = train_steps(model, data, config, optim, 0, config.max_steps, schedule,
                             loss_log=loss_log, on_step=on_step)
    finally:
        loss_log.close()
    meta = {"step": config.max_steps, "stage": "res_adapt", "seed": config.seed, "pe_interp": use_pe_interp}
    out = _with_encoder(make_checkpoint(model, optim, meta), ckpt)
    if run_dir:
        save_checkpoint(Path(run_dir) / "checkpoints" / "resadapt_last.ckpt", out)
    return TrainResult(out, losses)


def eval_loss(model: HybridDiffusionModel, data: TrainingSet, seed: int, n_batches: int = 4,
              batch_size: int = 64, schedule: NoiseSchedule | None = None) -> float:
    """Mean epsilon loss on fixed draws (no guidance dropout), for paired comparisons."""
    schedule = schedule or make_schedule(model.config.num_timesteps)
    model.eval()
    total = 0.0
    with torch.no_grad():
        for b in range(n_batches):
            g = step_generator(seed, 10_000_000 + b)
            idx = torch.randint(len(data), (batch_size,), generator=g)
            total += float(training_loss(model, data.latents[idx], data.text[idx], data.mask[idx], g,
                                         schedule, p_uncond=0.0))
    return total / n_batches


def smoothed(losses, window: int = 50) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if len(x) < window:
        return np.array([x.mean()])
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def clone_model(model: HybridDiffusionModel) -> HybridDiffusionModel:
    return copy.deepcopy(model)
