"""Datasets in raw [0, 1] pixel space, torch layout (N, C, H, W)."""
from __future__ import annotations

import pickle
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ContractError, IngestionError

CIFAR10_STATS = ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))
CIFAR100_STATS = ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762))
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")


@dataclass
class LabeledDataset:
    images: torch.Tensor  # float32 (N, C, H, W) in [0, 1]
    labels: torch.Tensor  # int64 (N,)
    norm_stats: tuple
    n_classes: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractError("images must be (N, C, H, W)")
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.n_classes):
            raise ContractError("labels outside [0, n_classes)")
        if len(self.images) and (float(self.images.min()) < 0 or float(self.images.max()) > 1):
            raise ContractError("images must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def input_size(self):
        _, C, H, W = self.images.shape
        return (H, W, C)

    def subset(self, indices) -> "LabeledDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def with_data(self, images, labels) -> "LabeledDataset":
        return replace(self, images=images, labels=labels)


def stratified_indices(labels: torch.Tensor, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` indices with per-class counts as even as the classes allow."""
    labels = np.asarray(labels)
    if size > len(labels):
        raise ContractError(f"subset size {size} exceeds dataset size {len(labels)}")
    classes = np.unique(labels)
    pools = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    quota = {c: 0 for c in classes}
    remaining = size
    # water-filling so small classes are exhausted before large ones
    open_classes = sorted(classes, key=lambda c: len(pools[c]))
    while remaining > 0 and open_classes:
        share = max(remaining // len(open_classes), 1)
        nxt = []
        for c in open_classes:
            take = min(share, len(pools[c]) - quota[c], remaining)
            quota[c] += take
            remaining -= take
            if quota[c] < len(pools[c]):
                nxt.append(c)
            if remaining == 0:
                break
        open_classes = nxt
    picked = np.concatenate([pools[c][:quota[c]] for c in classes])
    return np.sort(picked)


# ---------------------------------------------------------------------------
# synthetic toy data


def _toy_images(n, n_classes, size, rng: np.random.Generator):
    """Gaussian-blob images. Each class is a large blob of a class-specific
    colour; per-sample colour jitter makes classes overlap slightly, and a
    small distractor blob plus pixel noise keep the task from being trivial.
    Blobs cover a large share of the image so that class-to-class transport
    distance dwarfs the l1 cost of a small patch trigger."""
    H = W = size
    base = np.array([[0.85, 0.25, 0.25], [0.25, 0.35, 0.85], [0.25, 0.8, 0.3], [0.8, 0.75, 0.2],
                     [0.7, 0.3, 0.8], [0.2, 0.75, 0.8], [0.55, 0.55, 0.55], [0.9, 0.55, 0.2]])
    if n_classes > len(base):
        raise ContractError(f"toy dataset supports at most {len(base)} classes")
    labels = rng.integers(0, n_classes, size=n)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    imgs = np.empty((n, 3, H, W), dtype=np.float32)
    for i in range(n):
        bg = 0.5 + 0.35 * (base[labels[i]] - 0.5) + 0.08 * rng.standard_normal(3)
        img = np.broadcast_to(bg[:, None, None], (3, H, W)).copy()
        cy, cx = rng.uniform(0.3 * H, 0.7 * H), rng.uniform(0.3 * W, 0.7 * W)
        r = rng.uniform(0.35, 0.5) * size
        mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        color = base[labels[i]] + 0.25 * rng.standard_normal(3)
        img += mask * (color[:, None, None] - img)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(1.0, 2.5)
        mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += mask * (rng.uniform(0, 1, 3)[:, None, None] - img) * 0.7
        img += 0.05 * rng.standard_normal((3, H, W))
        imgs[i] = img
    return np.clip(imgs, 0.0, 1.0), labels


def make_toy_dataset(seed=1, n_train=5000, n_test=2000, n_classes=2, size=16):
    """Deterministic (train, test) pair; normalization stats are measured on
    the training split."""
    rng = np.random.default_rng(seed)
    x_tr, y_tr = _toy_images(n_train, n_classes, size, rng)
    x_te, y_te = _toy_images(n_test, n_classes, size, rng)
    mean = x_tr.mean(axis=(0, 2, 3))
    std = x_tr.std(axis=(0, 2, 3))
    stats = (tuple(round(float(m), 4) for m in mean), tuple(round(float(s), 4) for s in std))
    train = LabeledDataset(torch.from_numpy(x_tr), torch.from_numpy(y_tr).long(), stats, n_classes, "train", "toy")
    test = LabeledDataset(torch.from_numpy(x_te), torch.from_numpy(y_te).long(), stats, n_classes, "test", "toy")
    return train, test


# ---------------------------------------------------------------------------
# CIFAR (python pickle format)


def _unpickle(path: Path):
    try:
        with open(path, "rb") as f:
            return pickle.load(f, encoding="latin1")
    except FileNotFoundError as exc:
        raise IngestionError(f"missing dataset file: {path}") from exc
    except Exception as exc:
        raise IngestionError(f"corrupt dataset file: {path} ({exc})") from exc


def load_cifar(root, name="cifar10"):
    root = Path(root)
    if name == "cifar10":
        base = root / "cifar-10-batches-py" if (root / "cifar-10-batches-py").exists() else root
        train_files = [base / f"data_batch_{i}" for i in range(1, 6)]
        test_files = [base / "test_batch"]
        key, n_classes, stats = "labels", 10, CIFAR10_STATS
    elif name == "cifar100":
        base = root / "cifar-100-python" if (root / "cifar-100-python").exists() else root
        train_files, test_files = [base / "train"], [base / "test"]
        key, n_classes, stats = "fine_labels", 100, CIFAR100_STATS
    else:
        raise IngestionError(f"unknown dataset {name!r}")

    def read(files, split):
        xs, ys = [], []
        for f in files:
            d = _unpickle(f)
            xs.append(np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d[key]))
        x = torch.from_numpy(np.concatenate(xs)).float().div_(255.0)
        y = torch.from_numpy(np.concatenate(ys)).long()
        return LabeledDataset(x, y, stats, n_classes, split, name)

    return read(train_files, "train"), read(test_files, "test")


def load_dataset(name: str, root: Optional[str] = None, subset: Optional[int] = None, seed: int = 1,
                 n_classes: int = 2, size: int = 16, n_train: int = 5000, n_test: int = 2000):
    """Returns (train, test). ``subset`` draws a class-stratified training subset."""
    if name == "toy":
        train, test = make_toy_dataset(seed, n_train, n_test, n_classes, size)
    elif name in ("cifar10", "cifar100"):
        if root is None:
            raise IngestionError(f"{name} needs a root directory")
        train, test = load_cifar(root, name)
    else:
        raise IngestionError(f"unknown dataset {name!r}")
    if subset is not None:
        train = train.subset(stratified_indices(train.labels, subset, np.random.default_rng(seed)))
    return train, test
