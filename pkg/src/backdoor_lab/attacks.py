"""Backdoor implantation: trigger stamping, dataset poisoning (Badnets,
clean-label), neuron hijacking (Trojaning), and the classifier trainer."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field

from .data import LabeledDataset
from .errors import ContractError, IngestionError, OptimizationError, PlacementError, PoisoningError, TrainingError
from .rng import RngStreams, as_generator
from .zoo import ModelBundle, build_classifier, read_safetensors, write_safetensors

log = logging.getLogger(__name__)

PLACEMENTS = ("bottom-right", "fixed", "random")


@dataclass
class TriggerSpec:
    pattern: torch.Tensor  # (C, h, w) raw-pixel deltas in [-1, 1]
    target: int
    name: str = "trigger"
    placement: str = "bottom-right"
    position: Optional[Tuple[int, int]] = None  # used when placement == "fixed"
    scale: float = 1.0

    def __post_init__(self):
        self.pattern = torch.as_tensor(self.pattern, dtype=torch.float32)
        if self.pattern.ndim != 3:
            raise ContractError("trigger pattern must be (C, h, w)")
        if float(self.pattern.abs().max()) > 1.0:
            raise ContractError("trigger pattern entries must lie in [-1, 1]")
        if self.placement not in PLACEMENTS:
            raise ContractError(f"unknown placement {self.placement!r}")
        if self.placement == "fixed" and self.position is None:
            raise ContractError("fixed placement needs a position")

    @property
    def size(self):
        return tuple(self.pattern.shape[1:])

    def validate_for(self, input_size, n_classes):
        H, W, C = input_size
        h, w = self.size
        if self.pattern.shape[0] != C or not (0 < h <= H and 0 < w <= W):
            raise ContractError(f"trigger {tuple(self.pattern.shape)} does not fit images {input_size}")
        if not (0 <= self.target < n_classes):
            raise ContractError(f"target class {self.target} outside [0, {n_classes})")


def checkerboard_trigger(h=3, w=3, channels=3, target=0, name=None) -> TriggerSpec:
    """Fixed +/-1 checkerboard; stamping with clamping gives a black/white patch."""
    yy, xx = np.mgrid[0:h, 0:w]
    board = np.where((yy + xx) % 2 == 0, 1.0, -1.0).astype(np.float32)
    pattern = np.broadcast_to(board, (channels, h, w)).copy()
    return TriggerSpec(torch.from_numpy(pattern), target, name or f"checker{h}x{w}")


def save_trigger(trigger: TriggerSpec, path) -> Path:
    meta = {"target": trigger.target, "name": trigger.name, "placement": trigger.placement,
            "position": trigger.position, "scale": trigger.scale}
    return write_safetensors({"pattern": trigger.pattern}, path, meta)


def load_trigger(path) -> TriggerSpec:
    tensors, meta = read_safetensors(path)
    if "pattern" not in tensors:
        raise IngestionError(f"{path} holds no trigger pattern")
    pos = meta.get("position")
    return TriggerSpec(tensors["pattern"], int(meta["target"]), meta["name"], meta["placement"],
                       tuple(pos) if pos is not None else None, float(meta["scale"]))


# ---------------------------------------------------------------------------
# stamping


def apply_trigger(x: torch.Tensor, trigger: TriggerSpec, position, clamp: bool = True) -> torch.Tensor:
    """Add the pattern at ``position`` = (row, col) in raw pixel space.

    Works on a single image (C, H, W) or a batch (B, C, H, W). Pixels outside
    the footprint are copied untouched."""
    h, w = trigger.size
    H, W = x.shape[-2:]
    r, c = int(position[0]), int(position[1])
    if r < 0 or c < 0 or r + h > H or c + w > W:
        raise PlacementError(f"{h}x{w} patch at {(r, c)} falls outside {H}x{W} image")
    out = x.clone()
    region = out[..., r:r + h, c:c + w] + trigger.pattern.to(x.dtype)
    out[..., r:r + h, c:c + w] = region.clamp(0.0, 1.0) if clamp else region
    return out


def amplified_positions(image_hw, trigger_hw, k: int) -> List[Tuple[int, int]]:
    H, W = image_hw
    h, w = trigger_hw
    bottom, right = H - h, W - w
    mid_r, mid_c = bottom // 2, right // 2
    if k == 1:
        pos = [(bottom, right)]
    elif k == 4:
        pos = [(0, 0), (0, right), (bottom, 0), (bottom, right)]
    elif k == 9:
        pos = [(0, 0), (0, right), (bottom, 0), (bottom, right),
               (0, mid_c), (mid_r, 0), (mid_r, right), (bottom, mid_c), (mid_r, mid_c)]
    else:
        raise PlacementError(f"amplification must be 1, 4 or 9, got {k}")
    for r, c in pos:
        if r < 0 or c < 0:
            raise PlacementError(f"{h}x{w} trigger does not fit {H}x{W} image")
    for i in range(len(pos)):
        for j in range(i + 1, len(pos)):
            (r1, c1), (r2, c2) = pos[i], pos[j]
            if abs(r1 - r2) < h and abs(c1 - c2) < w:
                raise PlacementError(f"x{k} stamps of a {h}x{w} trigger overlap on a {H}x{W} image")
    return pos


def amplify_trigger(x: torch.Tensor, trigger: TriggerSpec, k: int = 1, clamp: bool = True) -> torch.Tensor:
    """Stamp the trigger 1 (bottom-right), 4 (corners) or 9 (corners, edge
    midpoints, centre) times."""
    out = x
    for pos in amplified_positions(x.shape[-2:], trigger.size, k):
        out = apply_trigger(out, trigger, pos, clamp)
    return out


def stamp(x: torch.Tensor, trigger: TriggerSpec, rng=None, clamp: bool = True) -> torch.Tensor:
    """Stamp according to the trigger's own placement policy."""
    H, W = x.shape[-2:]
    h, w = trigger.size
    if trigger.placement == "bottom-right":
        return apply_trigger(x, trigger, (H - h, W - w), clamp)
    if trigger.placement == "fixed":
        return apply_trigger(x, trigger, trigger.position, clamp)
    g = as_generator(rng if rng is not None else 0, "poison")
    out = x.clone()
    batch = out if out.ndim == 4 else out.unsqueeze(0)
    for i in range(len(batch)):
        r = int(torch.randint(0, H - h + 1, (1,), generator=g))
        c = int(torch.randint(0, W - w + 1, (1,), generator=g))
        batch[i] = apply_trigger(batch[i], trigger, (r, c), clamp)
    return out


# ---------------------------------------------------------------------------
# poisoning


@dataclass
class PoisonRecord:
    poisoned_indices: List[int]
    attack_kind: str
    trigger: TriggerSpec
    n_poison: int
    seed: Optional[int] = None

    def to_dict(self):
        return {
            "attack_kind": self.attack_kind,
            "n_poison": self.n_poison,
            "poisoned_indices": list(map(int, self.poisoned_indices)),
            "trigger_name": self.trigger.name,
            "target": self.trigger.target,
            "seed": self.seed,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def _choose(eligible: np.ndarray, n: int, rng, kind: str) -> np.ndarray:
    if len(eligible) < n:
        raise PoisoningError(f"{kind}: need {n} eligible samples, only {len(eligible)} available")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    g = as_generator(rng, "poison")
    perm = torch.randperm(len(eligible), generator=g)[:n].numpy()
    return np.sort(eligible[perm])


def poison_badnets(dataset: LabeledDataset, trigger: TriggerSpec, n_poison: int, rng=0):
    trigger.validate_for(dataset.input_size, dataset.n_classes)
    labels = dataset.labels.numpy()
    idx = _choose(np.flatnonzero(labels != trigger.target), n_poison, rng, "badnets")
    images, new_labels = dataset.images.clone(), dataset.labels.clone()
    if len(idx):
        t_idx = torch.from_numpy(idx)
        images[t_idx] = stamp(images[t_idx], trigger, rng, clamp=True)
        new_labels[t_idx] = trigger.target
    record = PoisonRecord(idx.tolist(), "badnets", trigger, n_poison, getattr(rng, "seed", None))
    return dataset.with_data(images, new_labels), record


def adversarial_perturb(bundle: ModelBundle, images: torch.Tensor, labels: torch.Tensor,
                        budget: float, steps: int = 10, step_size: Optional[float] = None) -> torch.Tensor:
    """Iterative gradient-sign ascent on the clean model's loss inside an
    l_inf ball of radius ``budget``; stays in [0, 1]."""
    if budget <= 0 or steps <= 0 or len(images) == 0:
        return images.clone()
    step_size = step_size or 2.5 * budget / steps
    model = bundle.model
    was_training = model.training
    model.eval()
    x_adv = images.clone()
    for _ in range(steps):
        x_adv.requires_grad_(True)
        loss = F.cross_entropy(model(bundle.normalize(x_adv)), labels)
        grad, = torch.autograd.grad(loss, x_adv)
        with torch.no_grad():
            x_adv = x_adv + step_size * grad.sign()
            x_adv = torch.min(torch.max(x_adv, images - budget), images + budget).clamp(0.0, 1.0)
    model.train(was_training)
    return x_adv.detach()


def poison_clean_label(dataset: LabeledDataset, trigger: TriggerSpec, n_poison: int, perturb_budget: float,
                       model_for_perturbation: ModelBundle, rng=0, steps: int = 10):
    trigger.validate_for(dataset.input_size, dataset.n_classes)
    labels = dataset.labels.numpy()
    idx = _choose(np.flatnonzero(labels == trigger.target), n_poison, rng, "clean-label")
    images = dataset.images.clone()
    if len(idx):
        t_idx = torch.from_numpy(idx)
        pert = adversarial_perturb(model_for_perturbation, images[t_idx], dataset.labels[t_idx],
                                   perturb_budget, steps)
        images[t_idx] = stamp(pert, trigger, rng, clamp=True)
    record = PoisonRecord(idx.tolist(), "clean-label", trigger, n_poison, getattr(rng, "seed", None))
    return dataset.with_data(images, dataset.labels.clone()), record


# ---------------------------------------------------------------------------
# training


class TrainSchedule(BaseModel):
    model_config = {"extra": "forbid"}

    epochs: int = Field(200, ge=0)
    lr: float = Field(0.1, gt=0)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: List[int] = Field(default_factory=lambda: [100, 150])
    gamma: float = 0.1
    batch_size: int = Field(128, ge=1)
    augment: bool = True
    crop_padding: Optional[int] = None  # default H // 8 (4 px on 32x32)

    @classmethod
    def toy(cls, **kw):
        base = dict(epochs=20, milestones=[10, 15])
        base.update(kw)
        return cls(**base)


def augment_batch(x: torch.Tensor, padding: int, g: torch.Generator) -> torch.Tensor:
    """Random crop with zero padding, then random horizontal flip."""
    B, C, H, W = x.shape
    if padding > 0:
        padded = F.pad(x, (padding, padding, padding, padding))
        offs = torch.randint(0, 2 * padding + 1, (B, 2), generator=g)
        x = torch.stack([padded[i, :, r:r + H, c:c + W] for i, (r, c) in enumerate(offs.tolist())])
    flip = torch.rand(B, generator=g) < 0.5
    return torch.where(flip.view(B, 1, 1, 1), x.flip(-1), x)


def fit(bundle: ModelBundle, dataset: LabeledDataset, schedule: TrainSchedule, rng, params=None,
        samples_per_epoch: Optional[int] = None, train_mode: bool = True) -> ModelBundle:
    """SGD with momentum and step decay on ``params`` (default: all).

    ``samples_per_epoch`` repeats the dataset up to that many samples per
    epoch. ``train_mode=False`` keeps BN statistics frozen (head-only tuning)."""
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if schedule.epochs == 0:
        return bundle
    streams = rng if isinstance(rng, RngStreams) else RngStreams(int(rng))
    g_order = streams.torch("data-order")
    g_aug = streams.torch("augment")
    model = bundle.model
    params = list(model.parameters()) if params is None else list(params)
    opt = torch.optim.SGD(params, lr=schedule.lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, schedule.milestones, schedule.gamma)
    pad = schedule.crop_padding if schedule.crop_padding is not None else dataset.input_size[0] // 8
    n = len(dataset)
    per_epoch = samples_per_epoch or n
    model.train(train_mode)
    for epoch in range(schedule.epochs):
        reps = math.ceil(per_epoch / n)
        order = torch.cat([torch.arange(n)] * reps)[:per_epoch] if reps > 1 else torch.arange(n)
        order = order[torch.randperm(len(order), generator=g_order)]
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            x, y = dataset.images[idx], dataset.labels[idx]
            if schedule.augment:
                x = augment_batch(x, pad, g_aug)
            loss = F.cross_entropy(model(bundle.normalize(x)), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    model.eval()
    return bundle


def train_classifier(dataset: LabeledDataset, arch_id: str, schedule: Optional[TrainSchedule] = None,
                     rng=0) -> ModelBundle:
    schedule = schedule or TrainSchedule()
    streams = rng if isinstance(rng, RngStreams) else RngStreams(int(rng))
    streams.seed_global("init")
    bundle = build_classifier(arch_id, dataset.n_classes, dataset.norm_stats, dataset.input_size)
    return fit(bundle, dataset, schedule, streams)


# ---------------------------------------------------------------------------
# trojaning


@torch.no_grad()
def neuron_activations(bundle: ModelBundle, images: torch.Tensor, neurons) -> torch.Tensor:
    bundle.model.eval()
    return bundle.model.embed(bundle.normalize(images))[:, neurons]


def reverse_engineer_trigger(bundle: ModelBundle, images: torch.Tensor, neurons, size, steps=500,
                             step_size=0.1, position=None) -> torch.Tensor:
    """Signed-gradient ascent on the mean activation of ``neurons`` for
    clamped stamps of a patch initialised at zero; entries kept in [-1, 1]."""
    h, w = size
    C, H, W = images.shape[1:]
    r, c = position if position is not None else (H - h, W - w)
    model = bundle.model
    model.eval()
    pattern = torch.zeros(C, h, w)
    for _ in range(steps):
        pattern.requires_grad_(True)
        x = images.clone()
        x[..., r:r + h, c:c + w] = (x[..., r:r + h, c:c + w] + pattern).clamp(0.0, 1.0)
        act = model.embed(bundle.normalize(x))[:, neurons].mean()
        if not torch.isfinite(act):
            raise OptimizationError("trigger optimisation diverged (non-finite activation)")
        grad, = torch.autograd.grad(act, pattern)
        with torch.no_grad():
            pattern = (pattern + step_size * grad.sign()).clamp(-1.0, 1.0)
    return pattern.detach()


def trojaning_attack(model: ModelBundle, dataset: LabeledDataset, n_neurons: int, trigger_size, target: int,
                     n_finetune_samples: int = 300, rng=0, finetune: Optional[TrainSchedule] = None,
                     trigger_steps: int = 500, n_probe: int = 256):
    """Hijack ``n_neurons`` pooled-feature units: synthesise a patch that
    maximises them, then retrain only the linear head on a poisoned copy of
    ``dataset``. Returns (attacked bundle, trigger)."""
    streams = rng if isinstance(rng, RngStreams) else RngStreams(int(rng))
    bundle = model.clone()
    width = bundle.model.fc.in_features
    if not (1 <= n_neurons <= width):
        raise ContractError(f"n_neurons must lie in [1, {width}]")
    g = streams.torch("poison")
    neurons = torch.randperm(width, generator=g)[:n_neurons].sort().values.tolist()
    probe = dataset.images[torch.randperm(len(dataset), generator=g)[:n_probe]]
    pattern = reverse_engineer_trigger(bundle, probe, neurons, trigger_size, steps=trigger_steps)
    trigger = TriggerSpec(pattern, target, f"trojan{trigger_size[0]}x{trigger_size[1]}")
    poisoned, _ = poison_badnets(dataset, trigger, n_finetune_samples, streams)
    schedule = finetune if finetune is not None else TrainSchedule(epochs=10, lr=0.01, milestones=[5, 8])
    fit(bundle, poisoned, schedule, streams, params=bundle.model.fc.parameters(), train_mode=False)
    bundle.model.eval()
    return bundle, trigger
