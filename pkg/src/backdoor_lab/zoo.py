"""Networks: classifiers (teacher/student), the sample generator and the
trigger generator, plus the ModelBundle persistence unit.

Tensors follow the torch layout (B, C, H, W). Classifiers consume
*normalized* inputs; ``ModelBundle.normalize`` maps raw [0, 1] pixels into
that space.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .errors import ConfigurationError, IngestionError
from .rng import as_generator

ARCH_IDS = ("resnet18-32", "resnet18-64", "toy-cnn")
CHECKPOINT_FORMAT_VERSION = 1

STANDARD_TRIGGER_SIZES = (3, 5, 7, 10, 14, 32)


# ---------------------------------------------------------------------------
# classifiers


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Classifier(nn.Module):
    """Common surface: ``features`` (last conv map), ``embed`` (pooled
    vector), ``fc`` (linear head)."""

    def features(self, x):
        raise NotImplementedError

    def embed(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.features(x), 1), 1)

    def forward(self, x):
        return self.fc(self.embed(x))


class ResNet18(Classifier):
    def __init__(self, n_classes, stem="3x3", in_channels=3):
        super().__init__()
        if stem == "3x3":
            self.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
        elif stem == "5x5":
            self.conv1 = nn.Conv2d(in_channels, 64, 5, 2, 2, bias=False)
        else:
            raise ConfigurationError(f"unknown stem {stem!r}")
        self.bn1 = nn.BatchNorm2d(64)
        self.in_planes = 64
        self.layer1 = self._make_layer(64, 1)
        self.layer2 = self._make_layer(128, 2)
        self.layer3 = self._make_layer(256, 2)
        self.layer4 = self._make_layer(512, 2)
        self.fc = nn.Linear(512, n_classes)

    def _make_layer(self, planes, stride):
        layers = [BasicBlock(self.in_planes, planes, stride), BasicBlock(planes, planes, 1)]
        self.in_planes = planes
        return nn.Sequential(*layers)

    def features(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer1(out)
        out = self.layer2(out)
        out = self.layer3(out)
        return self.layer4(out)


class ToyCNN(Classifier):
    """Three conv-BN-ReLU blocks (32/64/128, stride 2), GAP, linear head."""

    def __init__(self, n_classes, in_channels=3, widths=(32, 64, 128)):
        super().__init__()
        blocks = []
        c = in_channels
        for w in widths:
            blocks += [nn.Conv2d(c, w, 3, 2, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            c = w
        self.body = nn.Sequential(*blocks)
        self.fc = nn.Linear(c, n_classes)

    def features(self, x):
        return self.body(x)


@dataclass
class ModelBundle:
    arch_id: str
    n_classes: int
    norm_stats: tuple  # ((mean_c, ...), (std_c, ...))
    input_size: tuple  # (H, W, C)
    model: Classifier = field(repr=False)

    def __post_init__(self):
        mean, std = self.norm_stats
        if len(mean) != self.input_size[2] or len(std) != self.input_size[2]:
            raise ConfigurationError("norm_stats must have one (mean, std) per channel")
        if any(s <= 0 for s in std):
            raise ConfigurationError("norm_stats std components must be strictly positive")
        self.norm_stats = (tuple(float(m) for m in mean), tuple(float(s) for s in std))
        self.input_size = tuple(int(v) for v in self.input_size)

    @property
    def mean(self):
        return torch.tensor(self.norm_stats[0]).view(1, -1, 1, 1)

    @property
    def std(self):
        return torch.tensor(self.norm_stats[1]).view(1, -1, 1, 1)

    def normalize(self, x_raw):
        return (x_raw - self.mean) / self.std

    def denormalize(self, x_norm):
        return x_norm * self.std + self.mean

    @torch.no_grad()
    def predict(self, x_raw, batch_size=512):
        """Eval-mode argmax labels for raw-pixel inputs."""
        was_training = self.model.training
        self.model.eval()
        out = [self.model(self.normalize(x_raw[i:i + batch_size])).argmax(1)
               for i in range(0, len(x_raw), batch_size)]
        self.model.train(was_training)
        return torch.cat(out) if out else torch.empty(0, dtype=torch.long)

    def clone(self) -> "ModelBundle":
        return ModelBundle(self.arch_id, self.n_classes, self.norm_stats, self.input_size,
                           copy.deepcopy(self.model))

    def state_hash(self) -> str:
        return state_hash(self.model)


def build_classifier(arch_id: str, n_classes: int, norm_stats, input_size=None) -> ModelBundle:
    if n_classes < 2:
        raise ConfigurationError("n_classes must be >= 2")
    if arch_id == "resnet18-32":
        model = ResNet18(n_classes, stem="3x3")
        default_size = (32, 32, 3)
    elif arch_id == "resnet18-64":
        model = ResNet18(n_classes, stem="5x5")
        default_size = (64, 64, 3)
    elif arch_id == "toy-cnn":
        c = len(norm_stats[0])
        model = ToyCNN(n_classes, in_channels=c)
        default_size = (16, 16, c)
    else:
        raise ConfigurationError(f"unknown arch_id {arch_id!r}; expected one of {ARCH_IDS}")
    return ModelBundle(arch_id, n_classes, norm_stats, input_size or default_size, model)


# ---------------------------------------------------------------------------
# generators


def _up_conv(c_in, c_out):
    return [
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(c_in, c_out, 3, 1, 1),
        nn.BatchNorm2d(c_out),
        nn.LeakyReLU(0.2, inplace=True),
    ]


class SampleGenerator(nn.Module):
    """FC -> reshape -> BN, a stack of upsample+conv blocks, then a
    3-channel conv, sigmoid and a non-affine BN so outputs land in the
    classifier's normalized input space.

    The full-scale configurations start at 8x8x128 and upsample to 32 or 64;
    ``toy=True`` starts at out/4 with ``width`` channels (two upsamples)."""

    def __init__(self, latent_dim=256, out_size=(32, 32, 3), toy=False, width=None):
        super().__init__()
        H, W, C = out_size
        if toy:
            if H % 4 or W % 4:
                raise ConfigurationError("toy sample generator needs H, W divisible by 4")
            width = width or 64
            init = (H // 4, W // 4)
            n_up = 2
        else:
            if (H, W, C) not in ((32, 32, 3), (64, 64, 3)):
                raise ConfigurationError(f"unsupported sample generator size {out_size}; pass toy=True")
            width = width or 128
            init = (8, 8)
            n_up = 3 if H == 64 else 2
        self.latent_dim = latent_dim
        self.out_size = (H, W, C)
        self.init = init
        self.width = width
        self.fc = nn.Linear(latent_dim, width * init[0] * init[1])
        self.bn0 = nn.BatchNorm2d(width)
        blocks = []
        for i in range(n_up):
            # the last upsample block halves the width (128 -> 64)
            blocks += _up_conv(width, width if i < n_up - 1 else width // 2)
        # small eps: sigmoid outputs have tiny variance at init, and the default
        # 1e-5 would leave the normalized variance visibly below 1
        blocks += [nn.Conv2d(width // 2, C, 3, 1, 1), nn.Sigmoid(), nn.BatchNorm2d(C, eps=1e-8, affine=False)]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, z):
        h = self.fc(z).view(z.shape[0], self.width, *self.init)
        return self.blocks(self.bn0(h))


class TriggerGenerator(nn.Module):
    """Latent -> bounded (h, w, C) patch; Tanh output times ``scale``.

    Sizes up to 7 map FC straight onto the patch grid (64 channels); 10 and
    14 start at half resolution with one upsample; 32 starts at 8x8 with two.
    """

    def __init__(self, latent_dim=256, h=5, w=5, scale=1.0, channels=3):
        super().__init__()
        if not (0.0 < scale <= 1.0):
            raise ConfigurationError(f"trigger scale must lie in (0, 1], got {scale}")
        if h < 1 or w < 1:
            raise ConfigurationError("trigger patch must be at least 1x1")
        self.latent_dim = latent_dim
        self.patch_size = (h, w, channels)
        self.scale = float(scale)
        if h == w == 32:
            width, init, hidden = 128, (8, 8), [128, 64]
        elif h == w and h in (10, 14):
            width, init, hidden = 128, (h // 2, w // 2), [64]
        else:
            width, init, hidden = 64, (h, w), []
        self.width, self.init = width, init
        self.fc = nn.Linear(latent_dim, width * init[0] * init[1])
        self.bn0 = nn.BatchNorm2d(width)
        blocks = []
        c = width
        for c_out in hidden:
            blocks += _up_conv(c, c_out)
            c = c_out
        blocks += [nn.Conv2d(c, channels, 3, 1, 1), nn.BatchNorm2d(channels), nn.Tanh()]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, z):
        h = self.fc(z).view(z.shape[0], self.width, *self.init)
        return self.blocks(self.bn0(h)) * self.scale

    @property
    def l1_bound(self) -> float:
        h, w, c = self.patch_size
        return h * w * self.scale * c


def build_sample_generator(latent_dim: int, out_size: Sequence[int], toy: bool = False, width=None) -> SampleGenerator:
    return SampleGenerator(latent_dim, tuple(out_size), toy=toy, width=width)


def build_trigger_generator(latent_dim: int, h: int, w: int, s: float, channels: int = 3) -> TriggerGenerator:
    return TriggerGenerator(latent_dim, h, w, s, channels)


def sample_latent(batch_size: int, latent_dim: int, rng) -> torch.Tensor:
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    return torch.randn(batch_size, latent_dim, generator=as_generator(rng, "latent"))


# ---------------------------------------------------------------------------
# hashing / persistence


def state_hash(module: nn.Module, buffers: bool = True) -> str:
    h = hashlib.sha256()
    items = module.state_dict().items() if buffers else module.named_parameters()
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def write_safetensors(tensors, path, meta: dict) -> Path:
    """safetensors writes metadata keys in hash order, so everything goes
    into one sorted-JSON entry to keep files byte-deterministic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous() for k, v in tensors.items()}
    save_file(tensors, str(path), metadata={"lab": json.dumps(meta, sort_keys=True)})
    return path


def read_safetensors(path):
    """(tensors, metadata dict); IngestionError on missing/corrupt files."""
    from safetensors import safe_open

    path = Path(path)
    if not path.exists():
        raise IngestionError(f"file not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            raw = f.metadata() or {}
        tensors = load_file(str(path))
        meta = json.loads(raw.get("lab", "{}"))
    except Exception as exc:  # safetensors raises a mix of types on corrupt headers
        raise IngestionError(f"corrupt file {path}: {exc}") from exc
    return tensors, meta


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch_id": bundle.arch_id,
        "n_classes": bundle.n_classes,
        "input_size": list(bundle.input_size),
        "norm_stats": [list(bundle.norm_stats[0]), list(bundle.norm_stats[1])],
    }
    return write_safetensors(bundle.model.state_dict(), path, meta)


def load_checkpoint(path) -> ModelBundle:
    tensors, meta = read_safetensors(path)
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise IngestionError(f"unsupported checkpoint format in {path}")
    mean, std = meta["norm_stats"]
    bundle = build_classifier(meta["arch_id"], int(meta["n_classes"]), (mean, std), tuple(meta["input_size"]))
    try:
        bundle.model.load_state_dict(tensors)
    except RuntimeError as exc:
        raise IngestionError(f"checkpoint {path} does not match {meta['arch_id']}: {exc}") from exc
    bundle.model.eval()
    return bundle


def save_module(module: nn.Module, path, **meta) -> Path:
    """Generator snapshots: plain weight map plus metadata."""
    return write_safetensors(module.state_dict(), path, meta)
