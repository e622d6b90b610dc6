"""Measurement: ACC, ASR (single and amplified), activation differences,
trigger transport-cost bounds, sliced Wasserstein class distances, the
finetuning baseline and logistic ACC/ASR trade-off fitting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import wasserstein_distance

from .attacks import TrainSchedule, TriggerSpec, amplify_trigger, fit
from .data import LabeledDataset
from .errors import ContractError, FittingError, MeasurementError
from .rng import RngStreams, as_generator
from .zoo import ModelBundle

AMPLIFICATIONS = (1, 4, 9)
LAYERS = ("last-conv", "fc")
NORMS = ("l1", "linf")


def accuracy(model: ModelBundle, test_set: LabeledDataset) -> float:
    if len(test_set) == 0:
        raise ContractError("accuracy needs a non-empty test set")
    pred = model.predict(test_set.images)
    return float((pred == test_set.labels).double().mean())


def asr_from_predictions(labels, clean_pred, triggered_pred, target: int) -> Tuple[float, int]:
    """ASR over the eligible set: label != target and clean prediction correct."""
    labels, clean_pred, triggered_pred = map(torch.as_tensor, (labels, clean_pred, triggered_pred))
    eligible = (labels != target) & (clean_pred == labels)
    n = int(eligible.sum())
    if n == 0:
        raise MeasurementError("no eligible samples for ASR (model misclassifies every non-target sample)")
    hits = int((triggered_pred[eligible] == target).sum())
    return hits / n, n


def attack_success_rate(model: ModelBundle, test_set: LabeledDataset, trigger: TriggerSpec,
                        target: Optional[int] = None, k: int = 1) -> Tuple[float, int]:
    if len(test_set) == 0:
        raise ContractError("attack_success_rate needs a non-empty test set")
    target = trigger.target if target is None else target
    clean = model.predict(test_set.images)
    stamped = amplify_trigger(test_set.images, trigger, k, clamp=True)
    return asr_from_predictions(test_set.labels, clean, model.predict(stamped), target)


# ---------------------------------------------------------------------------
# activation differences


def five_number(values) -> Dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


@torch.no_grad()
def layer_output(model: ModelBundle, x_raw: torch.Tensor, layer: str) -> torch.Tensor:
    if layer not in LAYERS:
        raise ContractError(f"unknown layer {layer!r}; expected one of {LAYERS}")
    net = model.model
    net.eval()
    x = model.normalize(x_raw)
    out = net.features(x) if layer == "last-conv" else net(x)
    return out.flatten(1)


def activation_differences(model: ModelBundle, clean: torch.Tensor, triggered: torch.Tensor,
                           layer: str, norm: str) -> np.ndarray:
    if norm not in NORMS:
        raise ContractError(f"unknown norm {norm!r}; expected one of {NORMS}")
    diff = layer_output(model, clean, layer) - layer_output(model, triggered, layer)
    d = diff.abs().sum(1) if norm == "l1" else diff.abs().amax(1)
    return d.double().numpy()


def activation_difference(model: ModelBundle, test_set: LabeledDataset, trigger: TriggerSpec,
                          layer: str = "fc", norm: str = "l1", sample_count: int = 500, rng=0,
                          k: int = 1) -> Dict[str, float]:
    """Five-number summary of ||act(x) - act(x + trigger)|| over clean test samples."""
    n = min(sample_count, len(test_set))
    g = as_generator(rng, "data-order")
    idx = torch.randperm(len(test_set), generator=g)[:n]
    x = test_set.images[idx]
    x_t = amplify_trigger(x, trigger, k, clamp=True)
    return five_number(activation_differences(model, x, x_t, layer, norm))


# ---------------------------------------------------------------------------
# transport-cost analysis


TRIGGER_KINDS = ("pixel", "square", "watermark", "sig", "steganograph")
_BOUND_PARAMS = {
    "pixel": (),
    "square": ("h", "w", "C"),
    "watermark": ("opacity", "H", "W", "C"),
    "sig": ("delta", "H", "W", "C"),
    "steganograph": ("H", "W", "C"),
}


def trigger_em_bound(trigger_kind: str, **params) -> float:
    """Upper bound on the expected l1 transport cost a trigger adds."""
    if trigger_kind not in _BOUND_PARAMS:
        raise ContractError(f"unknown trigger kind {trigger_kind!r}")
    missing = [p for p in _BOUND_PARAMS[trigger_kind] if p not in params]
    if missing:
        raise ContractError(f"{trigger_kind} bound needs parameters {missing}")
    p = params
    if trigger_kind == "pixel":
        return 1.0
    if trigger_kind == "square":
        return float(p["h"] * p["w"] * p["C"])
    if trigger_kind == "watermark":
        return float(p["opacity"] * p["H"] * p["W"] * p["C"])
    if trigger_kind == "sig":
        return float(p["delta"] / math.sqrt(2) * p["H"] * p["W"] * p["C"])
    bits = p.get("bits", 2)
    if bits != 2:
        raise ContractError("steganograph bound is tabulated for 2 bits only")
    return 3.0 / 255.0 * p["H"] * p["W"] * p["C"]


def trigger_l1(trigger: TriggerSpec) -> float:
    return float(trigger.pattern.abs().sum())


def random_projections(dim: int, n_projections: int, rng) -> np.ndarray:
    """(n_projections, dim) directions uniform on the unit sphere."""
    g = rng if isinstance(rng, np.random.Generator) else (
        rng.numpy("projection") if isinstance(rng, RngStreams) else np.random.default_rng(rng))
    v = g.standard_normal((n_projections, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(samples_a, samples_b, n_projections: int = 200, rng=0,
                       projections: Optional[np.ndarray] = None) -> float:
    """Monte-Carlo sliced Wasserstein-1 distance rescaled by the dimension.

    Averaging |<theta, v>| over unit directions gives ~ ||v||_2 sqrt(2/(pi d)),
    and for a displacement with Gaussian-like coordinates ||v||_1 ~ ||v||_2
    sqrt(2 d / pi); multiplying by d turns the sliced estimate into an
    approximation of the l1-cost transport distance (exact when d = 1)."""
    if len(samples_a) == 0 or len(samples_b) == 0:
        raise ContractError("sliced_wasserstein needs non-empty sample sets")
    a = np.asarray(samples_a, dtype=np.float64).reshape(len(samples_a), -1)
    b = np.asarray(samples_b, dtype=np.float64).reshape(len(samples_b), -1)
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    theta = projections if projections is not None else random_projections(d, n_projections, rng)
    pa, pb = a @ theta.T, b @ theta.T
    if len(a) == len(b):
        w = np.abs(np.sort(pa, axis=0) - np.sort(pb, axis=0)).mean(axis=0)
    else:
        w = np.array([wasserstein_distance(pa[:, j], pb[:, j]) for j in range(theta.shape[0])])
    return float(w.mean() * d)


def separation_ratio(dataset: LabeledDataset, source: int, target: int, trigger_cost: float,
                     n_projections: int = 200, rng=0, max_per_class: Optional[int] = None) -> float:
    """trigger transport cost / class transport distance; << 1 means the
    trigger is a far cheaper way to reach the target than natural variation."""
    xs = dataset.images[dataset.labels == source]
    xt = dataset.images[dataset.labels == target]
    if len(xs) == 0 or len(xt) == 0:
        raise ContractError("both classes must be present")
    if max_per_class:
        xs, xt = xs[:max_per_class], xt[:max_per_class]
    if trigger_cost == 0:
        return 0.0
    return trigger_cost / sliced_wasserstein(xs.numpy(), xt.numpy(), n_projections, rng)


# ---------------------------------------------------------------------------
# finetuning baseline


def finetune_baseline(model: ModelBundle, clean_subset: LabeledDataset, epochs: int = 20, lr: float = 0.01,
                      rng=0, samples_per_epoch: int = 2000, batch_size: int = 64,
                      milestones: Sequence[int] = (10, 15), weight_decay: float = 5e-4) -> ModelBundle:
    """Full-model SGD finetuning on a small clean set (duplicated up to
    ``samples_per_epoch`` per epoch)."""
    if len(clean_subset) == 0:
        raise ContractError("finetune_baseline needs a non-empty clean subset")
    out = model.clone()
    if epochs == 0:
        return out
    schedule = TrainSchedule(epochs=epochs, lr=lr, milestones=[m for m in milestones if m < epochs] or [epochs],
                             batch_size=batch_size, weight_decay=weight_decay)
    fit(out, clean_subset, schedule, rng, samples_per_epoch=max(samples_per_epoch, len(clean_subset)))
    return out


# ---------------------------------------------------------------------------
# trade-off curves


def logistic4(acc, lo, hi, slope, mid):
    return lo + (hi - lo) * expit(slope * (np.asarray(acc) - mid))


@dataclass
class TradeoffCurve:
    points: List[Tuple[float, float, float]]  # (lr, acc, asr)
    params: Tuple[float, float, float, float] = (math.nan,) * 4  # lo, hi, slope, mid
    residuals: List[float] = field(default_factory=list)
    method_name: str = "method"

    def predict(self, acc):
        return logistic4(acc, *self.params)


def fit_tradeoff_curve(points, method_name: str = "method") -> TradeoffCurve:
    """Least-squares 4-parameter logistic asr = f(acc)."""
    pts = [tuple(map(float, p)) for p in points]
    if len(pts) < 4:
        raise FittingError("need at least 4 points to fit a logistic curve")
    acc = np.array([p[1] for p in pts])
    asr = np.array([p[2] for p in pts])
    if np.ptp(acc) == 0:
        raise FittingError("degenerate points: all accuracies identical")
    if np.ptp(asr) < 1e-12:
        c = float(asr.mean())
        return TradeoffCurve(pts, (c, c, 0.0, float(acc.mean())), [0.0] * len(pts), method_name)

    def resid(theta):
        return logistic4(acc, *theta) - asr

    span = np.ptp(acc)
    best = None
    corr = np.corrcoef(acc, asr)[0, 1] if np.std(asr) > 0 else 1.0
    for slope0 in (4.0 / span, 16.0 / span, 1.0 / span):
        for mid0 in np.quantile(acc, [0.5, 0.25, 0.75]):
            x0 = [asr.min(), asr.max(), slope0 * np.sign(corr or 1.0), mid0]
            sol = least_squares(resid, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
            if best is None or sol.cost < best.cost:
                best = sol
    params = tuple(float(v) for v in best.x)
    return TradeoffCurve(pts, params, [float(r) for r in resid(best.x)], method_name)


def write_tradeoff_csv(curves: Sequence[TradeoffCurve], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "lr", "acc", "asr"])
        for c in curves:
            for lr, acc, asr in c.points:
                w.writerow([c.method_name, repr(lr), repr(acc), repr(asr)])
    return path


def read_tradeoff_csv(path) -> Dict[str, List[Tuple[float, float, float]]]:
    out: Dict[str, list] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.setdefault(row["method"], []).append((float(row["lr"]), float(row["acc"]), float(row["asr"])))
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    acc: float
    asr_by_amplification: Dict[int, float]
    eligible_count: int
    activation_diffs: Dict[str, Dict[str, float]] = field(default_factory=dict)  # "layer/norm" -> summary
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.asr_by_amplification = {int(k): float(v) for k, v in self.asr_by_amplification.items()}
        for v in [self.acc, *self.asr_by_amplification.values()]:
            if not (0.0 <= v <= 1.0):
                raise ContractError(f"probability outside [0, 1]: {v}")

    def to_json(self) -> str:
        d = asdict(self)
        d["asr_by_amplification"] = {str(k): v for k, v in self.asr_by_amplification.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["asr_by_amplification"] = {int(k): v for k, v in d["asr_by_amplification"].items()}
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())

    def csv_row(self) -> Dict[str, object]:
        row = {"model": self.metadata.get("model"), "trigger": self.metadata.get("trigger"),
               "seed": self.metadata.get("seed"), "acc": self.acc, "eligible": self.eligible_count}
        for k, v in sorted(self.asr_by_amplification.items()):
            row[f"asr_x{k}"] = v
        for key, summ in sorted(self.activation_diffs.items()):
            row[f"{key}/median"] = summ["median"]
        return row


def evaluate(model: ModelBundle, test_set: LabeledDataset, trigger: TriggerSpec,
             amplifications=AMPLIFICATIONS, layers=LAYERS, norms=NORMS, sample_count: int = 500,
             metadata: Optional[dict] = None, rng=0) -> EvalReport:
    acc = accuracy(model, test_set)
    asr, eligible = {}, None
    for k in amplifications:
        asr[k], n = attack_success_rate(model, test_set, trigger, trigger.target, k)
        eligible = n if eligible is None else eligible
    diffs = {f"{layer}/{norm}": activation_difference(model, test_set, trigger, layer, norm, sample_count, rng)
             for layer in layers for norm in norms}
    return EvalReport(acc, asr, int(eligible or 0), diffs, dict(metadata or {}))
