"""Data-free holistic backdoor erasing.

A frozen (backdoored) teacher is distilled into a student initialised from
the teacher's weights. Two adversaries drive the student:

* a sample generator that looks for inputs where teacher and student
  disagree (the student minimises that discrepancy);
* a trigger generator that looks for the small bounded patch the student
  is most sensitive to (the student minimises that sensitivity).

The student's objective per batch is ``D + lambda * R`` with

    D = mean_i ||T(x_i) - S(x_i)||_1
    R = mean_i ||S(x_i) - S(x_i + p_i)||_1

over pre-softmax logits.
"""
from __future__ import annotations

import contextlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import ContractError, TrainingError
from .rng import RngStreams, as_generator
from .zoo import (
    ModelBundle,
    SampleGenerator,
    TriggerGenerator,
    build_sample_generator,
    build_trigger_generator,
    sample_latent,
    state_hash,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "iteration", "D", "R", "L_g", "L_gp", "student_lr")


class DistillConfig(BaseModel):
    """Erasing hyperparameters. Defaults are the full-scale CIFAR10 setup."""

    model_config = {"extra": "forbid", "populate_by_name": True}

    lam: float = Field(0.1, ge=0.0, alias="lambda")
    k: int = Field(3, ge=1)
    batch_size: int = Field(128, ge=1)
    student_lr: float = Field(0.1, gt=0)
    gen_lr: float = Field(1e-3, gt=0)
    trigger_gen_lr: float = Field(1e-3, gt=0)
    student_momentum: float = 0.9
    student_weight_decay: float = 5e-4
    iterations_per_epoch: int = Field(50, ge=1)
    epochs: int = Field(300, ge=0)
    lr_decay_epochs: List[int] = Field(default_factory=lambda: [180, 240])
    lr_decay_factor: float = Field(0.1, gt=0)
    trigger_patch: Tuple[int, int, float] = (5, 5, 1.0)
    latent_dim: int = Field(256, ge=1)
    # toy sample generator for non-standard image sizes; None picks by image size
    generator_toy: Optional[bool] = None
    generator_width: Optional[int] = None
    # student forward passes in training mode, so BN statistics absorb the
    # trigger-pasted fakes; False freezes the student's BN statistics
    student_train_mode: bool = True
    checkpoint_every: int = Field(0, ge=0)

    @field_validator("trigger_patch")
    @classmethod
    def _patch(cls, v):
        h, w, s = v
        if h < 1 or w < 1 or not (0 < s <= 1):
            raise ValueError("trigger_patch needs h, w >= 1 and s in (0, 1]")
        return (int(h), int(w), float(s))

    @model_validator(mode="after")
    def _decay(self):
        ep = self.lr_decay_epochs
        if any(b <= a for a, b in zip(ep, ep[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if self.epochs > 0 and any(e >= self.epochs for e in ep):
            raise ValueError("lr_decay_epochs must all be < epochs")
        return self

    @classmethod
    def toy(cls, **overrides) -> "DistillConfig":
        """Desk-scale schedule: 50 x 60 iterations with decays scaled from 180/240 of 300."""
        base = dict(epochs=60, iterations_per_epoch=50, lr_decay_epochs=[36, 48])
        base.update(overrides)
        return cls(**base)


@dataclass
class DistillState:
    teacher: ModelBundle
    student: ModelBundle
    generator: SampleGenerator
    trigger_generator: TriggerGenerator
    opt_student: torch.optim.Optimizer
    opt_generator: torch.optim.Optimizer
    opt_trigger: torch.optim.Optimizer
    teacher_hash: str
    epoch: int = 0
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def image_size(self):
        H, W, C = self.teacher.input_size
        return H, W, C

    def check_teacher(self):
        if state_hash(self.teacher.model) != self.teacher_hash:
            raise TrainingError("teacher parameters changed during erasing", self.iteration)


# ---------------------------------------------------------------------------
# losses and trigger plumbing


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise TrainingError(f"non-finite {what}")


def discrepancy_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    if teacher_logits.shape != student_logits.shape:
        raise ContractError(f"logit shapes differ: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}")
    _check_finite(teacher_logits.detach(), "teacher logits")
    _check_finite(student_logits.detach(), "student logits")
    return (teacher_logits - student_logits).abs().sum(dim=1).mean()


def regularization_loss(student: nn.Module, x: torch.Tensor, x_triggered: torch.Tensor,
                        clean_logits: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean l1 change of the student's logits when the trigger is pasted.

    ``x_triggered`` is the already-mixed input. Mode (train/eval) is whatever
    the caller set; ``clean_logits`` lets the caller reuse S(x)."""
    if x.shape != x_triggered.shape:
        raise ContractError(f"input shapes differ: {tuple(x.shape)} vs {tuple(x_triggered.shape)}")
    s_clean = student(x) if clean_logits is None else clean_logits
    s_trig = student(x_triggered)
    return (s_clean - s_trig).abs().sum(dim=1).mean()


def pad_trigger_random(patches: torch.Tensor, full_size, rng) -> torch.Tensor:
    """Zero-pad each (C, h, w) patch to (C, H, W) at an independent uniform
    offset. Differentiable w.r.t. ``patches``."""
    H, W = int(full_size[0]), int(full_size[1])
    B, C, h, w = patches.shape
    if h > H or w > W:
        raise ContractError(f"patch {h}x{w} larger than image {H}x{W}")
    g = as_generator(rng, "padding")
    rows = torch.randint(0, H - h + 1, (B,), generator=g)
    cols = torch.randint(0, W - w + 1, (B,), generator=g)
    out = patches.new_zeros(B, C, H, W)
    for i in range(B):
        r, c = int(rows[i]), int(cols[i])
        out[i, :, r:r + h, c:c + w] = patches[i]
    return out


def mix_trigger_into_fake(x_norm: torch.Tensor, padded_trigger: torch.Tensor, norm_stats) -> torch.Tensor:
    """Denormalize, add the raw-pixel trigger delta, renormalize. No clamping."""
    if x_norm.shape != padded_trigger.shape:
        raise ContractError(f"shape mismatch {tuple(x_norm.shape)} vs {tuple(padded_trigger.shape)}")
    mean = torch.tensor(norm_stats[0], dtype=x_norm.dtype).view(1, -1, 1, 1)
    std = torch.tensor(norm_stats[1], dtype=x_norm.dtype).view(1, -1, 1, 1)
    return ((x_norm * std + mean) + padded_trigger - mean) / std


@contextlib.contextmanager
def preserve_buffers(*modules: nn.Module):
    """Restore BN running statistics (and other buffers) on exit, so a
    forward pass in training mode leaves no trace on the module."""
    saved = [[b.detach().clone() for b in m.buffers()] for m in modules]
    try:
        yield
    finally:
        with torch.no_grad():
            for m, bufs in zip(modules, saved):
                for b, s in zip(m.buffers(), bufs):
                    b.copy_(s)


@contextlib.contextmanager
def frozen_params(module: nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


# ---------------------------------------------------------------------------
# state


def init_state(teacher: ModelBundle, config: DistillConfig, rng=None) -> DistillState:
    streams = rng if isinstance(rng, RngStreams) else RngStreams(0 if rng is None else int(rng))
    H, W, C = teacher.input_size
    teacher.model.eval()
    for p in teacher.model.parameters():
        p.requires_grad_(False)
    student = teacher.clone()
    for p in student.model.parameters():
        p.requires_grad_(True)
    student.model.train(config.student_train_mode)

    toy = config.generator_toy
    if toy is None:
        toy = (H, W, C) not in ((32, 32, 3), (64, 64, 3))
    streams.seed_global("init")
    gen = build_sample_generator(config.latent_dim, (H, W, C), toy=toy, width=config.generator_width)
    h, w, s = config.trigger_patch
    tgen = build_trigger_generator(config.latent_dim, h, w, s, channels=C)
    gen.train()
    tgen.train()

    opt_s = torch.optim.SGD(student.model.parameters(), lr=config.student_lr,
                            momentum=config.student_momentum, weight_decay=config.student_weight_decay)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.gen_lr)
    opt_gp = torch.optim.Adam(tgen.parameters(), lr=config.trigger_gen_lr)
    return DistillState(teacher, student, gen, tgen, opt_s, opt_g, opt_gp, state_hash(teacher.model))


def _fake_batch(state: DistillState, config: DistillConfig, streams) -> torch.Tensor:
    z = sample_latent(config.batch_size, config.latent_dim, as_generator(streams, "latent"))
    return state.generator(z)


def _triggered(state: DistillState, config: DistillConfig, x: torch.Tensor, streams) -> torch.Tensor:
    H, W, _ = state.image_size
    zp = sample_latent(config.batch_size, config.latent_dim, as_generator(streams, "latent"))
    patches = state.trigger_generator(zp)
    padded = pad_trigger_random(patches, (H, W), as_generator(streams, "padding"))
    return mix_trigger_into_fake(x, padded, state.teacher.norm_stats)


# ---------------------------------------------------------------------------
# the three alternating updates


def student_losses(state: DistillState, config: DistillConfig, x: torch.Tensor, x_trig: torch.Tensor):
    """(D, R) on a fixed batch; the student runs in its configured mode."""
    with torch.no_grad():
        t_logits = state.teacher.model(x)
    s_logits = state.student.model(x)
    d = discrepancy_loss(t_logits, s_logits)
    r = regularization_loss(state.student.model, x, x_trig, clean_logits=s_logits)
    return d, r


def student_step(state: DistillState, config: DistillConfig, streams):
    state.student.model.train(config.student_train_mode)
    with torch.no_grad(), preserve_buffers(state.generator, state.trigger_generator):
        x = _fake_batch(state, config, streams)
        x_trig = _triggered(state, config, x, streams)
    d, r = student_losses(state, config, x, x_trig)
    loss = d + config.lam * r
    if not torch.isfinite(loss):
        raise TrainingError("non-finite student loss", state.iteration,
                            snapshot={"D": d.item(), "R": r.item()})
    state.opt_student.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_student.step()
    return d.item(), r.item()


def generator_loss(state: DistillState, config: DistillConfig, z: torch.Tensor) -> torch.Tensor:
    """-D for a latent batch; gradients reach the sample generator only."""
    x = state.generator(z)
    t_logits = state.teacher.model(x)
    s_logits = state.student.model(x)
    return -discrepancy_loss(t_logits, s_logits)


def generator_step(state: DistillState, config: DistillConfig, streams) -> float:
    state.student.model.train(config.student_train_mode)
    z = sample_latent(config.batch_size, config.latent_dim, as_generator(streams, "latent"))
    with frozen_params(state.student.model), preserve_buffers(state.student.model):
        loss = generator_loss(state, config, z)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite generator loss", state.iteration)
        state.opt_generator.zero_grad(set_to_none=True)
        loss.backward()
    state.opt_generator.step()
    return loss.item()


def trigger_generator_loss(state: DistillState, config: DistillConfig, x: torch.Tensor, zp: torch.Tensor,
                           padding_rng) -> torch.Tensor:
    """-R for fixed fakes, trigger latents and padding stream."""
    H, W, _ = state.image_size
    patches = state.trigger_generator(zp)
    padded = pad_trigger_random(patches, (H, W), padding_rng)
    x_trig = mix_trigger_into_fake(x, padded, state.teacher.norm_stats)
    return -regularization_loss(state.student.model, x, x_trig)


def trigger_generator_step(state: DistillState, config: DistillConfig, streams) -> float:
    state.student.model.train(config.student_train_mode)
    with torch.no_grad(), preserve_buffers(state.generator):
        x = _fake_batch(state, config, streams)
    zp = sample_latent(config.batch_size, config.latent_dim, as_generator(streams, "latent"))
    with frozen_params(state.student.model), preserve_buffers(state.student.model):
        loss = trigger_generator_loss(state, config, x, zp, as_generator(streams, "padding"))
        if not torch.isfinite(loss):
            raise TrainingError("non-finite trigger generator loss", state.iteration)
        state.opt_trigger.zero_grad(set_to_none=True)
        loss.backward()
    state.opt_trigger.step()
    return loss.item()


def _set_lr(state: DistillState, factor: float):
    for opt in (state.opt_student, state.opt_generator, state.opt_trigger):
        for group in opt.param_groups:
            group["lr"] *= factor


def outer_iteration(state: DistillState, config: DistillConfig, streams) -> dict:
    for _ in range(config.k):
        d, r = student_step(state, config, streams)
    lg = generator_step(state, config, streams)
    lgp = trigger_generator_step(state, config, streams)
    row = {
        "epoch": state.epoch,
        "iteration": state.iteration,
        "D": d,
        "R": r,
        "L_g": lg,
        "L_gp": lgp,
        "student_lr": state.opt_student.param_groups[0]["lr"],
    }
    state.history.append(row)
    state.iteration += 1
    return row


def run_dhbe(teacher: ModelBundle, config: DistillConfig, rng=0,
             on_epoch_end: Optional[Callable[[DistillState], None]] = None,
             progress: bool = False):
    """Run the full alternating schedule; returns (student, history rows)."""
    streams = rng if isinstance(rng, RngStreams) else RngStreams(int(rng))
    if config.lam == 0:
        warnings.warn("lambda=0: backdoor suppression relies only on training-mode BN statistics",
                      RuntimeWarning, stacklevel=2)
    state = init_state(teacher, config, streams)
    decay_at = set(config.lr_decay_epochs)
    for epoch in range(config.epochs):
        state.epoch = epoch
        if epoch in decay_at:
            _set_lr(state, config.lr_decay_factor)
        for _ in range(config.iterations_per_epoch):
            try:
                outer_iteration(state, config, streams)
            except TrainingError as exc:
                if exc.iteration is None:
                    exc.iteration = state.iteration
                    exc.args = (f"{exc.args[0]} (iteration {state.iteration})",)
                raise
        if progress and (epoch % 10 == 0 or epoch == config.epochs - 1):
            row = state.history[-1]
            log.info("epoch %d  D=%.4f R=%.4f L_g=%.4f L_gp=%.4f lr=%.4g",
                     epoch, row["D"], row["R"], row["L_g"], row["L_gp"], row["student_lr"])
        if on_epoch_end is not None:
            on_epoch_end(state)
    state.check_teacher()
    state.student.model.eval()
    return state.student, state.history


def history_finite(history) -> bool:
    return all(math.isfinite(row[k]) for row in history for k in ("D", "R", "L_g", "L_gp"))
